"""Generate labeled synthetic chains, split them into instances, and write JSONL.

Run: python3 gallery/02_synthetic_chains_and_splitting.py
"""
import tempfile
from pathlib import Path

from reco.data import SynthSpec, gen_synthetic, length_counts, read_jsonl, split_chain, split_chains, write_jsonl

chains = gen_synthetic(SynthSpec(n_chains=200, p_scene_break=0.3, p_threshold_break=0.3), seed=1)
broken = next(c for c in chains if c.break_edge == 3)
print("a chain broken at edge 3 by", broken.problem)
for e in broken.events:
    print("   ", e)

# Prefixes up to the break are reliable; the prefix ending on the break is not.
for inst in split_chain(broken):
    print(f"  length {inst.length}: reliable={inst.label.reliable} problem={inst.label.problem}")

instances, rejected = split_chains(chains)
print("instances per length:", length_counts(instances), "rejected chains:", len(rejected))

with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "chains.jsonl"
    write_jsonl(path, chains)
    assert read_jsonl(path) == chains
    print("round-tripped", len(chains), "chains through", path.name)
