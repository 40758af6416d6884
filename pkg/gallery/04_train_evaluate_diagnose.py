"""Train on synthetic data, compare with the no-EA-CVAE ablation, and diagnose a chain.

Takes about a minute. Run: python3 gallery/04_train_evaluate_diagnose.py
"""
import json

import numpy as np

from reco.data import ChainLatents, SynthSpec, gen_synthetic, render_chain, split_chains
from reco.encoder import RawChain
from reco.model import TrainConfig
from reco.predictor import diagnose
from reco.trainer import evaluate, train

spec = SynthSpec(n_chains=2500, p_scene_break=0.4, p_threshold_break=0.4, context_noise=0.3)
chains = gen_synthetic(spec, seed=7)
train_set, dev_set, test_set = (split_chains(p)[0] for p in (chains[:2000], chains[2000:2250], chains[2250:]))

config = dict(m=64, lr=1e-3, epochs=8, seed=0)
full = train(TrainConfig(**config), train_set, dev_set)
ablated = train(TrainConfig(**config, no_eacvae=True), train_set, dev_set)
for name, cp in (("full", full), ("no EA-CVAE", ablated)):
    r = evaluate(cp, test_set)
    print(f"{name:>11}: accuracy {r.accuracy:.3f}  F1 {r.f1:.3f}  problem accuracy {r.problem_accuracy:.3f}")

# A three-event chain whose second step crosses a scene boundary.
lat = ChainLatents(scene=[0, 1, 1, 1], produced=[1, 1, 1, 1], required=[0, 0, 0, 0], concepts=[3, 14, 15, 9, 26])
query = render_chain("query", lat, np.random.default_rng(0), SynthSpec())
po, _, _ = full.model().forward(RawChain("query", query.events[:3], query.contexts[:2]))
print(json.dumps(diagnose(po).to_json(), indent=2))
