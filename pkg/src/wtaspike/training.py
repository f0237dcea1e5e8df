"""Toy-task harness: vocabulary, batch generators, AdamW, training loop and evaluation.

Tasks
-----
``copy``
    ``payload + "|" + payload`` with a uniformly random payload of ``P``
    symbols (``seq_len = 2P + 1``). Scored on the second half: the logits at
    positions ``P .. 2P-1`` must predict the copied payload.
``mlm-synthetic``
    Sequences that repeat a random motif of ``period`` symbols. A masked
    symbol can always be recovered from the same phase elsewhere.
``char-lm``
    Uniform random windows over a character-level corpus.

All randomness is derived from ``(seed, split, step)`` through SplitMix64, so
batches do not depend on how many batches were drawn before.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .config import TaskConfig, TrainConfig, from_flat, model_from_flat, to_flat
from .errors import CheckpointError, ConfigError, InputError, TrainingAborted
from .model import ModelConfig, SpikingTransformer
from .objectives import MaskingPlan, clm_loss, mlm_loss, mlm_mask
from .rng import SplitMix64, derive

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<bos>", "<mask>")
DELIMITER = "|"


class Vocabulary:
    """Character vocabulary: sorted symbols first, then ``<pad>``, ``<bos>``, ``<mask>``.

    The mask symbol is always the last id, ``V - 1``.
    """

    def __init__(self, symbols):
        symbols = sorted(set(symbols))
        if not symbols:
            raise InputError("vocabulary needs at least one symbol")
        clash = set(symbols) & set(SPECIALS)
        if clash:
            raise InputError(f"symbols collide with special tokens: {sorted(clash)}")
        self.symbols = symbols + list(SPECIALS)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        self.pad_id, self.bos_id, self.mask_id = (self.index[s] for s in SPECIALS)

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def num_regular(self) -> int:
        return len(self.symbols) - len(SPECIALS)

    def encode(self, text: str) -> np.ndarray:
        out = np.empty(len(text), dtype=np.int64)
        for i, ch in enumerate(text):
            if ch not in self.index or ch in SPECIALS:
                raise InputError(f"symbol {ch!r} is not in the vocabulary")
            out[i] = self.index[ch]
        return out

    def decode(self, ids) -> str:
        return "".join(self.symbols[int(i)] for i in ids)


def build_vocab(text: str) -> Vocabulary:
    if not text:
        raise InputError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(text)


def synthetic_vocab(alphabet: int) -> Vocabulary:
    """``alphabet`` payload letters plus the copy delimiter."""
    letters = [chr(ord("a") + i) for i in range(alphabet)]
    return Vocabulary(letters + [DELIMITER])


@dataclass(frozen=True)
class Batch:
    """``tokens`` is the model input. ``targets``/``score`` say what is predicted where.

    For causal tasks ``targets[:, t]`` is the token expected from the logits at
    ``t``; for MLM it is the original token. ``score`` marks positions that count
    towards evaluation metrics.
    """

    tokens: np.ndarray
    targets: np.ndarray
    score: np.ndarray
    original: np.ndarray | None = None
    plan: MaskingPlan | None = None


def _causal_batch(tokens: np.ndarray, score: np.ndarray | None = None) -> Batch:
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    valid = np.zeros(tokens.shape, dtype=bool)
    valid[:, :-1] = True
    if score is not None:
        valid &= score
    return Batch(tokens, targets, valid)


def copy_batch(rng: SplitMix64, batch: int, seq_len: int, vocab: Vocabulary) -> Batch:
    """``payload | payload``; scored where the logits must reproduce the payload."""
    p = (seq_len - 1) // 2
    payload = rng.integers(0, vocab.num_regular - 1, (batch, p))
    delim = np.full((batch, 1), vocab.index[DELIMITER])
    tokens = np.concatenate([payload, delim, payload], axis=1)
    score = np.zeros(tokens.shape, dtype=bool)
    score[:, p:2 * p] = True
    return _causal_batch(tokens, score)


def periodic_tokens(rng: SplitMix64, batch: int, seq_len: int, period: int, vocab: Vocabulary):
    motif = rng.integers(0, vocab.num_regular - 1, (batch, period))
    return motif[:, np.arange(seq_len) % period]


def mlm_batch(tokens: np.ndarray, ratio: float, seed: int, vocab: Vocabulary) -> Batch:
    masked, plan = mlm_mask(tokens, ratio, seed, len(vocab), vocab.mask_id)
    return Batch(masked, tokens, plan.selection, tokens, plan)


def batch_iter(corpus_ids, seq_len: int, batch: int, seed: int, start: int = 0):
    """Endless stream of ``[batch, seq_len]`` windows; step ``i`` depends only on ``(seed, i)``."""
    ids = np.asarray(corpus_ids, dtype=np.int64)
    if len(ids) < seq_len + 1:
        raise InputError(f"corpus of {len(ids)} tokens is too short for windows of {seq_len} (+1)")
    step = start
    while True:
        rng = SplitMix64(derive(seed, "windows", step))
        starts = rng.integers(0, len(ids) - seq_len + 1, batch)
        yield _causal_batch(ids[starts[:, None] + np.arange(seq_len)])
        step += 1


class Task:
    """Deterministic batch source for one :class:`TaskConfig`."""

    def __init__(self, config: TaskConfig):
        self.config = config
        if config.name == "char-lm":
            text = Path(config.corpus).read_text(encoding="utf-8")
            self.vocab = build_vocab(text)
            ids = self.vocab.encode(text)
            cut = max(int(len(ids) * 0.9), config.seq_len + 1)
            self.splits = {"train": ids[:cut], "val": ids[cut - config.seq_len - 1:]}
            for name, part in self.splits.items():
                if len(part) < config.seq_len + 1:
                    raise InputError(f"corpus {config.corpus}: {name} split shorter than seq_len + 1")
        else:
            self.vocab = synthetic_vocab(config.alphabet)
        self.objective = "mlm" if config.name == "mlm-synthetic" else "clm"

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def batch(self, seed: int, split: str, step: int, size: int) -> Batch:
        cfg = self.config
        rng = SplitMix64(derive(seed, cfg.name, split, step))
        if cfg.name == "copy":
            return copy_batch(rng, size, cfg.seq_len, self.vocab)
        if cfg.name == "mlm-synthetic":
            toks = periodic_tokens(rng, size, cfg.seq_len, cfg.period, self.vocab)
            return mlm_batch(toks, cfg.mask_ratio, derive(seed, "mask", split, step), self.vocab)
        stream = batch_iter(self.splits[split], cfg.seq_len, size, derive(seed, split), start=step)
        return next(stream)


def check_compatible(config: TrainConfig, task: Task) -> None:
    if config.model.vocab_size != task.vocab_size:
        raise ConfigError(
            f"model.vocab_size={config.model.vocab_size} but task {config.task.name} needs {task.vocab_size}")
    if config.task.seq_len > config.model.max_len:
        raise ConfigError(f"task.seq_len={config.task.seq_len} exceeds model.max_len={config.model.max_len}")
    if config.model.causal != (task.objective == "clm"):
        need = "true" if task.objective == "clm" else "false"
        raise ConfigError(f"model.causal must be {need} for task {config.task.name}")


# ---------------------------------------------------------------------------
# objective and metrics
# ---------------------------------------------------------------------------


def batch_loss(logits: Tensor, batch: Batch, objective: str) -> Tensor:
    if objective == "mlm":
        return mlm_loss(logits, batch.original, batch.plan)
    return clm_loss(logits, batch.tokens)


def scored_stats(logits: np.ndarray, batch: Batch):
    """``(sum NLL, correct, count)`` over the scored positions; ties in argmax go low."""
    sel = batch.score
    z = logits[sel]
    t = batch.targets[sel]
    if len(t) == 0:
        return 0.0, 0, 0
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[:, 0]
    nll = lse - z[np.arange(len(t)), t]
    correct = int((np.argmax(z, axis=-1) == t).sum())
    return float(nll.sum()), correct, int(len(t))


@dataclass(frozen=True)
class Metrics:
    loss: float
    ppl: float
    acc: float

    def line(self) -> str:
        return f"loss={self.loss:.6f} ppl={self.ppl:.6f} acc={self.acc:.6f}"


def metrics_from(nll: float, correct: int, count: int) -> Metrics:
    if count == 0:
        return Metrics(0.0, 1.0, 0.0)
    loss = nll / count
    return Metrics(loss, math.exp(loss), correct / count)


def evaluate_model(model: SpikingTransformer, task: Task, seed: int, batches: int = 4,
                   batch_size: int = 16, split: str = "val") -> Metrics:
    """No-gradient pass over ``batches`` fixed held-out batches."""
    nll = correct = count = 0
    with ad.no_grad():
        for i in range(batches):
            b = task.batch(seed, split, i, batch_size)
            s = scored_stats(model.forward(b.tokens).data, b)
            nll += s[0]
            correct += s[1]
            count += s[2]
    return metrics_from(nll, correct, count)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


class AdamWState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def to_blobs(self) -> dict:
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    @classmethod
    def from_blobs(cls, step: int, blobs: dict) -> "AdamWState":
        st = cls()
        st.step = step
        for key, arr in blobs.items():
            kind, _, name = key.partition(".")
            if kind == "m":
                st.m[name] = arr.copy()
            elif kind == "v":
                st.v[name] = arr.copy()
            else:
                raise CheckpointError(f"unknown optimiser blob {key!r}")
        return st


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` (name -> Tensor)."""
    step = state.step + 1
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in {name} at step {step}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise InputError(f"{name}: gradient shape {g.shape} vs parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** step)
        v_hat = v / (1 - beta2 ** step)
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)
    state.step = step


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * f
    return total


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then constant."""
    warm = int(round(config.warmup_frac * config.steps))
    if warm > 0 and step < warm:
        return config.lr * (step + 1) / warm
    return config.lr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: SpikingTransformer, config: TrainConfig | None = None,
                    optim: AdamWState | None = None) -> None:
    """Without a full run config only the ``model.*`` keys are embedded."""
    if config is None:
        flat = {k: v for k, v in to_flat(TrainConfig(model=model.config)).items() if k.startswith("model.")}
    else:
        flat = to_flat(config)
    optim = optim or AdamWState()
    ckpt.save(path, flat, model.state_dict(), optim.step, optim.to_blobs())


@dataclass
class Loaded:
    model: SpikingTransformer
    flat: dict
    optim: AdamWState

    @property
    def train_config(self) -> TrainConfig | None:
        if any(k.startswith("task.") for k in self.flat):
            return from_flat(self.flat)
        return None


def load_checkpoint(path, expected: ModelConfig | None = None) -> Loaded:
    """Rebuild the model from the embedded config and load its parameters.

    With ``expected`` given, any differing model field raises
    :class:`CheckpointError` naming that field.
    """
    flat, params, step, blobs = ckpt.load(path)
    try:
        mcfg = model_from_flat(flat)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: embedded config invalid: {exc}") from None
    if expected is not None:
        for name, want in expected.to_dict().items():
            got = getattr(mcfg, name)
            if got != want:
                raise CheckpointError(f"{path}: config mismatch in model.{name}: checkpoint has {got!r}, expected {want!r}")
    model = SpikingTransformer(mcfg)
    try:
        model.load_state_dict(params)
    except InputError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return Loaded(model, flat, AdamWState.from_blobs(step, blobs))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


METRICS_HEADER = ("step", "split", "loss", "ppl", "acc")


@dataclass
class TrainResult:
    model: SpikingTransformer
    log: list
    checkpoint: Path | None
    final_val: Metrics
    train_losses: list


def train(config: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    """Run the configured task end to end.

    Metrics rows ``(step, split, loss, ppl, acc)`` are written at step 0
    (validation only) and after every ``eval_interval`` updates (train mean
    since the last row, plus validation). A non-finite loss or gradient
    raises :class:`TrainingAborted`; the previous parameters are then saved
    as ``last_good.ckpt``.
    """
    task = Task(config.task)
    check_compatible(config, task)
    model = SpikingTransformer(config.model, seed=derive(config.seed, "init"))
    params = model.parameters()
    state = AdamWState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    writer = None
    fh = None
    if out is not None:
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)

    def emit(step, split, m: Metrics):
        row = (step, split, f"{m.loss:.6f}", f"{m.ppl:.6f}", f"{m.acc:.6f}")
        rows.append(row)
        if writer is not None:
            writer.writerow(row)
            fh.flush()

    def evaluate_now():
        return evaluate_model(model, task, config.seed, config.eval_batches, config.batch_size)

    last_ckpt = None
    recent = []
    train_losses = []
    try:
        final = evaluate_now()
        emit(0, "val", final)
        for step in range(config.steps):
            batch = task.batch(config.seed, "train", step, config.batch_size)
            logits = model.forward(batch.tokens)
            loss = batch_loss(logits, batch, task.objective)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite loss {value} at step {step + 1}")
            model.zero_grad()
            ad.backward(loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            clip_grads(grads, config.clip_norm)
            adamw_step(params, grads, state, lr_at(config, step), config.beta1, config.beta2,
                       config.eps, config.weight_decay)
            _, c, n = scored_stats(logits.data, batch)
            recent.append((value, c, n))
            train_losses.append(value)
            done = step + 1
            if done % config.eval_interval == 0:
                tl = float(np.mean([r[0] for r in recent]))
                hits, seen = sum(r[1] for r in recent), sum(r[2] for r in recent)
                recent = []
                emit(done, "train", Metrics(tl, math.exp(min(tl, 700.0)), hits / seen if seen else 0.0))
                final = evaluate_now()
                emit(done, "val", final)
                if progress is not None:
                    progress(done, tl, final)
            if out is not None and config.checkpoint_interval > 0 and done % config.checkpoint_interval == 0:
                last_ckpt = out / f"step_{done}.ckpt"
                save_checkpoint(last_ckpt, model, config, state)
    except TrainingAborted:
        if out is not None:
            save_checkpoint(out / "last_good.ckpt", model, config, state)
        raise
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        last_ckpt = out / "final.ckpt"
        save_checkpoint(last_ckpt, model, config, state)
    if config.steps % config.eval_interval:
        final = evaluate_now()
    return TrainResult(model, rows, last_ckpt, final, train_losses)


def evaluate(path, task: TaskConfig | None = None, batches: int = 8, batch_size: int = 16,
             seed: int | None = None) -> Metrics:
    """Metrics of a saved checkpoint on its own (or the given) task's held-out split."""
    loaded = load_checkpoint(path)
    tcfg = loaded.train_config
    if task is None:
        if tcfg is None:
            raise CheckpointError(f"{path}: no task recorded; pass one explicitly")
        task = tcfg.task
    seed = seed if seed is not None else (tcfg.seed if tcfg is not None else 0)
    t = Task(task)
    if t.vocab_size != loaded.model.config.vocab_size:
        raise CheckpointError(
            f"{path}: config mismatch in model.vocab_size: checkpoint has "
            f"{loaded.model.config.vocab_size}, task {task.name} needs {t.vocab_size}")
    return evaluate_model(loaded.model, t, seed, batches, batch_size)


def with_overrides(config: TrainConfig, **model_fields) -> TrainConfig:
    return replace(config, model=replace(config.model, **model_fields))
