"""Per-tile inference latency.

    python3 scripts/benchmark_tiles.py [--checkpoint final.ckpt] [--size 400] [--threads 1] [--out bench.json]

Without a checkpoint a freshly initialized toy generator (2 blocks, 16
features, x4) is timed; the numbers depend only on the architecture.
"""

import argparse
import json

import numpy as np

from regfree_sr.inference import benchmark_inference, generator_backend, write_report
from regfree_sr.nn import Generator, GeneratorConfig, load_checkpoint

p = argparse.ArgumentParser()
p.add_argument("--checkpoint")
p.add_argument("--size", type=int, default=400)
p.add_argument("--tile", type=int, default=100)
p.add_argument("--overlap", type=int, default=20)
p.add_argument("--threads", type=int, default=1)
p.add_argument("--out")
args = p.parse_args()

if args.checkpoint:
    gen = load_checkpoint(args.checkpoint).generator
else:
    gen = Generator(GeneratorConfig(n_res_blocks=2, n_features=16, upscale=4))
c = gen.config.channels
x = np.random.default_rng(0).random((args.size, args.size, c)).astype(np.float32)
rep = benchmark_inference(x, generator_backend(gen), gen.config.upscale, args.tile, args.overlap, args.threads)
lat = rep["tile_latency_s"]
print(f"{rep['tile_count']} tiles of {args.tile}x{args.tile}, {args.threads} thread(s)")
print(f"per tile: mean {1e3 * lat['mean']:.1f} ms  median {1e3 * lat['median']:.1f} ms  max {1e3 * lat['max']:.1f} ms")
print(f"whole image: {rep['wall_time_s']:.2f} s  ({rep['reference_note']})")
if args.out:
    write_report(rep, args.out)
else:
    print(json.dumps({k: v for k, v in rep.items() if k != "per_tile_s"}, indent=2))
