"""Join cause-effect pairs into chains by lexical overlap of effect and next cause.

Run: python3 gallery/03_joining_causal_pairs.py
"""
from reco.data import CausalPair, jaccard, join_pairs_into_chains

pairs = [
    CausalPair("heavy rain", "river flooding", "after a week of storms"),
    CausalPair("river flooding", "crop damage", "in low farmland"),
    CausalPair("severe crop damage", "higher grain prices", "with low reserves"),
    CausalPair("higher grain prices", "bakery closures", "in small towns"),
    CausalPair("tax cut", "more spending", "during a boom"),
]
print("jaccard('crop damage', 'severe crop damage') =", round(jaccard("crop damage", "severe crop damage"), 3))
for ch in join_pairs_into_chains(pairs, sim_threshold=0.6):
    print(" -> ".join(ch.events))
    print("    contexts:", "; ".join(ch.contexts))
