#!/usr/bin/env python3
"""
latfuse command-line runner

Generates synthetic diffusion latents, fuses base/refined pairs with Adaptive
Global Fusion (AGF) or Dynamic Spatial Fusion (DSF), inspects latent files,
checks analytic gradients and benchmarks the convolution paths.

Usage:
    python run_latfuse.py <command> [OPTIONS]

Examples:
    # A base/refined pair sharing structure, refined with extra detail
    python run_latfuse.py gen-latent --kind structured-pair --shape 1x4x128x128 --seed 42 --out pair.npy

    # Fuse with randomly initialised AGF parameters and keep the attention maps
    python run_latfuse.py fuse --method agf --base pair_base.npy --refined pair_refined.npy \
        --init uniform:0.1:7 --out fused.npy --maps-out maps.npy

    # Per-channel statistics, exits 1 if the file holds NaN/Inf
    python run_latfuse.py stats --in fused.npy

    # Gradient check in float64
    python run_latfuse.py gradcheck --method dsf --shape 1x2x5x5 --seed 1

    # Compare naive and fast convolution
    LATFUSE_THREADS=8 python run_latfuse.py bench --op conv7x7 --shape 1x8x128x128 --iters 5 --impl fast
"""

from latfuse.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
