"""Train a small WD-mini on the copy task, then evaluate and price its inference.

    python3 demos/train_and_measure.py [out_dir] [steps]
"""
import sys
from dataclasses import replace
from pathlib import Path

from wtaspike import energy
from wtaspike.config import load_config
from wtaspike.training import Task, evaluate, load_checkpoint, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
cfg = load_config(Path(__file__).with_name("copy_wd_mini.cfg"))
if len(sys.argv) > 2:
    cfg = replace(cfg, steps=int(sys.argv[2]))

res = train(cfg, out, progress=lambda step, tl, m: print(f"step {step:5d}  train {tl:.4f}  val {m.line()}"))
print("final", evaluate(res.checkpoint).line())

loaded = load_checkpoint(res.checkpoint)
tokens = Task(cfg.task).batch(cfg.seed, "val", 0, cfg.batch_size).tokens
report = energy.model_energy_report(loaded.model, tokens)
report.write_csv(out / "energy.csv")
print(f"energy per 512 tokens: {report.total_mj:.6g} mJ ({len(report.rows)} priced layers)")
print(energy.assert_mul_free(loaded.model, tokens))
