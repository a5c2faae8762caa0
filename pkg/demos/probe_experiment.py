"""
Enhancing and adversarial training, seen through speaker probes
================================================================

Trains a small CTC seed model on the synthetic speaker-entangled corpus,
continue-trains it three ways (CTC only, speaker enhancing at block 3,
adaptive adversarial at block 6) and probes every block of each frozen
model for speaker identity.  Takes a few minutes on one core.

Pass an output directory to also write the comparison table and an SVG of
the probe curves.
"""

import sys

from spkmtl.config import ExperimentConfig
from spkmtl.experiments import prepare, probe_model, run_variant, seed_model, stability_check
from spkmtl.objectives import ObjectiveSpec
from spkmtl.probe import compare_reports
from spkmtl.report import RunSummary, table, write_report

cfg = ExperimentConfig()
data = prepare(cfg)
seed = seed_model(cfg, data)

runs = [run_variant(cfg, data, seed, spec, name) for name, spec in [
    ("baseline", ObjectiveSpec()),
    ("enh@3", ObjectiveSpec("spk-enh", l1=3)),
    ("adv@6", ObjectiveSpec("spk-adv-adaptive", l2=6)),
]]
base = runs[0]
for r in runs[1:]:
    print(f"{r.name}: {compare_reports(base.probe, r.probe).summary()}")

# the adaptive scale starts near chance and the discriminator loss rebounds
check = stability_check(runs[2].log, cfg.corpus.num_speakers)
print(f"lambda_adapt early {check.early_lambda:.3f}, max {check.max_lambda:.3f}; "
      f"L_spk2 minimum at {check.argmin_fraction:.0%} of training")

summaries = [RunSummary(r.name, r.ler, r.probe) for r in runs]
print(table(summaries))
if len(sys.argv) > 1:
    print("wrote", *write_report(summaries, sys.argv[1]))
