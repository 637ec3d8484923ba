"""
How much does the decoder sound like the encoder?
=================================================

Self-BLEU scores one model's translations against another model's
translations of the same sources. Here the reference is the encoder's
parallel output after EBT; the hypotheses are the decoder's greedy output
at each later stage of one QBT-Staged run.

Pass the output directory of a finished ``qbtlab train --schedule
qbt-staged`` run (for instance the one printed by demo 03).
"""

import json
import sys
from pathlib import Path

from qbtlab.checkpoint import load_checkpoint
from qbtlab.config import load_config
from qbtlab.evaluation import self_bleu
from qbtlab.runner import translate
from qbtlab.synthdata import load_task

run = Path(sys.argv[1])
summary = json.loads((run / "summary.json").read_text())
ckpts = {k.split("_", 1)[1]: v for k, v in summary["stage_checkpoints"].items()}
task = load_task(load_config(run / "config.yaml", apply_env=False).resolved_data_dir)
sources, _ = task.test.direction("s")

encoder, _, _ = load_checkpoint(ckpts["EBT"])
reference = translate(encoder, sources, "s", "nar")

for stage in ("EBT", "EBTD", "BT"):
    model, _, _ = load_checkpoint(ckpts[stage])
    hyp = translate(model, sources, "s", "ar")
    print(f"decoder after {stage:>4}: self-BLEU vs EBT encoder {self_bleu(reference, hyp).bleu:5.1f}")
