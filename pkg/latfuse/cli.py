"""
Command-line front end: generate latents, fuse them, inspect files, check
gradients and benchmark the convolution paths.

Machine-readable results go to stdout as `key=value` lines; status messages
and logs go to stderr.
"""

import argparse
import hashlib
import logging
import os
import sys
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence, TextIO, Tuple

import numpy as np

from latfuse import rng
from latfuse.errors import (
    GradCheckCapError,
    InvalidSpecError,
    LatfuseError,
    ManifestError,
    ShapeMismatchError,
    UsageError,
)
from latfuse.fusion import (
    AGF_KERNEL_SIZES,
    DEFAULT_K_AGF,
    FusionModule,
    FusionSpec,
    InitScheme,
    fuse,
    init_params,
    load_params,
    save_params,
)
from latfuse.gradients import DEFAULT_EPS, DEFAULT_THRESHOLD, check_module
from latfuse.latent_io import read_latent, write_latent
from latfuse.nn_ops import IMPLS, Conv2dParams, conv2d, conv_macs
from latfuse.parallel import THREADS_ENV, get_num_threads, set_num_threads
from latfuse.synth import KINDS, SynthSpec, detail_energy, generate, generate_pair
from latfuse.tensor import DTYPES, Tensor, dtype_name

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_USAGE_ERROR = 2
EXIT_INTERRUPTED = 130

FUSION_METHODS = ("agf", "dsf")
PASSTHROUGH_METHODS = ("base", "refined")
BENCH_OPS = ("conv1x1", "conv7x7", "agf", "dsf")
# conv1x1 mimics AGF's two logits, conv7x7 DSF's single gate
BENCH_CONV_OUT_CHANNELS = {"conv1x1": 2, "conv7x7": 1}

DTYPE_ENV = "LATFUSE_DTYPE"
LOG_FILE_ENV = "LATFUSE_LOG_FILE"
DTYPE_COMMANDS = ("gen-latent", "bench")


# Color codes for status lines on a terminal
class Colors:
    HEADER = '\033[95m'
    OKBLUE = '\033[94m'
    OKGREEN = '\033[92m'
    WARNING = '\033[93m'
    FAIL = '\033[91m'
    ENDC = '\033[0m'


@dataclass
class RunConfig:
    command: str
    threads: Optional[int] = None
    dtype: str = "f32"
    log_file: Optional[str] = None
    verbose: bool = False
    quiet: bool = False
    # paths
    input: Optional[str] = None
    base: Optional[str] = None
    refined: Optional[str] = None
    out: Optional[str] = None
    maps_out: Optional[str] = None
    save_weights: Optional[str] = None
    # fusion
    method: Optional[str] = None
    k_agf: Optional[int] = None
    init: Optional[InitScheme] = None
    weights: Optional[str] = None
    impl: str = "fast"
    # generation / checking / benchmarking
    kind: Optional[str] = None
    shape: Optional[Tuple[int, int, int, int]] = None
    seed: int = 0
    amplitude: float = 1.0
    eps: float = DEFAULT_EPS
    threshold: float = DEFAULT_THRESHOLD
    op: Optional[str] = None
    iters: int = 1


def parse_shape(text: str) -> Tuple[int, int, int, int]:
    """Parse an `NxCxHxW` shape string."""
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"Bad shape {text!r}; expected NxCxHxW, e.g. 1x4x128x128")
    if len(dims) != 4:
        raise UsageError(f"Bad shape {text!r}; expected 4 dims NxCxHxW")
    if min(dims) < 1:
        raise UsageError(f"Bad shape {text!r}; every dim must be >= 1")
    return dims


def format_shape(shape: Sequence[int]) -> str:
    return "x".join(str(d) for d in shape)


def pair_paths(out: str) -> Tuple[Path, Path]:
    path = Path(out)
    suffix = path.suffix or ".npy"
    return path.with_name(f"{path.stem}_base{suffix}"), path.with_name(f"{path.stem}_refined{suffix}")


def channel_stats(t: Tensor) -> List[dict]:
    """Per-channel min/max/mean/std over finite values, plus the non-finite count."""
    stats = []
    for ci in range(t.c):
        values = t.data[:, ci].astype(np.float64).ravel()
        finite = values[np.isfinite(values)]
        row = {"channel": ci, "nonfinite": int(values.size - finite.size)}
        if finite.size:
            row.update(min=finite.min(), max=finite.max(), mean=finite.mean(), std=finite.std())
        else:
            row.update(min=np.nan, max=np.nan, mean=np.nan, std=np.nan)
        stats.append(row)
    return stats


def checksum(t: Tensor) -> str:
    return hashlib.sha256(t.data.tobytes()).hexdigest()[:16]


class LatfuseRunner:
    """Parses the command line and dispatches to one subcommand"""

    def __init__(self, stdout: Optional[TextIO] = None, stderr: Optional[TextIO] = None):
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr
        self.config: Optional[RunConfig] = None
        self.logger = logging.getLogger("latfuse")

    def _setup_logging(self, log_file: Optional[str], level: int):
        """Setup logging configuration"""
        self.logger.handlers.clear()
        self.logger.propagate = False
        self.logger.setLevel(level)
        formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')

        handlers: List[logging.Handler] = [logging.StreamHandler(self.stderr)]
        if log_file:
            try:
                handlers.append(logging.FileHandler(log_file))
            except OSError as e:
                # Log file is optional, keep going with console logging only
                self._print_status(f"Cannot open log file {log_file}: {e}", "WARNING")

        for handler in handlers:
            handler.setFormatter(formatter)
            self.logger.addHandler(handler)

    def _print_status(self, message: str, status: str = "INFO"):
        """Print formatted status messages to stderr"""
        if self.config is not None and self.config.quiet and status != "ERROR":
            return
        color_map = {
            "INFO": Colors.OKBLUE,
            "SUCCESS": Colors.OKGREEN,
            "WARNING": Colors.WARNING,
            "ERROR": Colors.FAIL,
            "HEADER": Colors.HEADER,
        }
        timestamp = datetime.now().strftime("%H:%M:%S")
        if self.stderr.isatty():
            color = color_map.get(status, Colors.OKBLUE)
            print(f"{color}[{timestamp}] {message}{Colors.ENDC}", file=self.stderr)
        else:
            print(f"[{timestamp}] {status}: {message}", file=self.stderr)

    def _emit(self, **fields):
        """Write one key=value record to stdout"""
        parts = []
        for key, value in fields.items():
            if isinstance(value, (float, np.floating)):
                value = f"{value:.9e}"
            parts.append(f"{key}={value}")
        print(" ".join(parts), file=self.stdout)

    def _parse_arguments(self, argv: Optional[Sequence[str]]) -> argparse.Namespace:
        """Parse command line arguments"""
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument('--threads', type=int, help=f'Worker cap (fallback: ${THREADS_ENV}, then 1)')
        common.add_argument('--log-file', help=f'Also log to this file (fallback: ${LOG_FILE_ENV})')
        common.add_argument('--verbose', '-v', action='store_true', help='Enable debug logging')
        common.add_argument('--quiet', '-q', action='store_true', help='Only report errors on stderr')

        parser = argparse.ArgumentParser(
            prog="latfuse",
            description="Fuse base and refined diffusion latents with AGF or DSF",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  %(prog)s gen-latent --kind structured-pair --shape 1x4x128x128 --seed 42 --out pair.npy
  %(prog)s fuse --method agf --base pair_base.npy --refined pair_refined.npy --init uniform:0.1:7 --out fused.npy
  %(prog)s stats --in fused.npy
  %(prog)s gradcheck --method dsf --shape 1x2x5x5 --seed 1
  %(prog)s bench --op conv7x7 --shape 1x8x128x128 --iters 5 --impl fast
            """,
        )
        sub = parser.add_subparsers(dest='command', required=True)

        gen = sub.add_parser('gen-latent', parents=[common], help='Write synthetic latents')
        gen.add_argument('--kind', choices=KINDS, required=True)
        gen.add_argument('--shape', required=True, help='NxCxHxW')
        gen.add_argument('--seed', type=int, default=0)
        gen.add_argument('--amplitude', type=float, default=1.0)
        gen.add_argument('--dtype', choices=sorted(DTYPES), help=f'Working dtype (fallback: ${DTYPE_ENV}, then f32)')
        gen.add_argument('--out', required=True, help='Output .npy; structured-pair writes <stem>_base/<stem>_refined')

        fuse_p = sub.add_parser('fuse', parents=[common], help='Fuse a base/refined latent pair')
        fuse_p.add_argument('--method', choices=FUSION_METHODS + PASSTHROUGH_METHODS, required=True)
        fuse_p.add_argument('--base', required=True)
        fuse_p.add_argument('--refined', required=True)
        fuse_p.add_argument('--out', required=True)
        fuse_p.add_argument('--maps-out', help='Also write the attention maps (W_b/W_r or the DSF gate)')
        source = fuse_p.add_mutually_exclusive_group()
        source.add_argument('--init', help="'zeros' or 'uniform:<scale>:<seed>'")
        source.add_argument('--weights', help='Weights manifest JSON')
        fuse_p.add_argument('--k-agf', type=int, choices=AGF_KERNEL_SIZES, help='AGF kernel size for --init (default 1)')
        fuse_p.add_argument('--save-weights', help='Write the parameters used to this manifest path')
        fuse_p.add_argument('--impl', choices=IMPLS, default='fast')

        stats = sub.add_parser('stats', parents=[common], help='Summarise a latent file')
        stats.add_argument('--in', dest='input', required=True)

        grad = sub.add_parser('gradcheck', parents=[common], help='Check analytic gradients by finite differences')
        grad.add_argument('--method', choices=FUSION_METHODS, required=True)
        grad.add_argument('--shape', default='1x2x5x5')
        grad.add_argument('--seed', type=int, default=1)
        grad.add_argument('--eps', type=float, default=DEFAULT_EPS)
        grad.add_argument('--threshold', type=float, default=DEFAULT_THRESHOLD)
        grad.add_argument('--k-agf', type=int, choices=AGF_KERNEL_SIZES, default=DEFAULT_K_AGF)
        grad.add_argument('--init', help="Parameter init (default uniform:0.5:<seed>)")

        bench = sub.add_parser('bench', parents=[common], help='Time a kernel or fusion module')
        bench.add_argument('--op', choices=BENCH_OPS, required=True)
        bench.add_argument('--shape', default='1x8x128x128')
        bench.add_argument('--iters', type=int, default=10)
        bench.add_argument('--impl', choices=IMPLS, default='fast')
        bench.add_argument('--seed', type=int, default=0)
        bench.add_argument('--k-agf', type=int, choices=AGF_KERNEL_SIZES, default=DEFAULT_K_AGF)
        bench.add_argument('--dtype', choices=sorted(DTYPES), help=f'Working dtype (fallback: ${DTYPE_ENV}, then f32)')

        compare = sub.add_parser('compare', parents=[common], help='Run AGF, DSF and the refined-only baseline side by side')
        compare.add_argument('--base', required=True)
        compare.add_argument('--refined', required=True)
        compare.add_argument('--init', default='zeros', help="'zeros' or 'uniform:<scale>:<seed>'")
        compare.add_argument('--k-agf', type=int, choices=AGF_KERNEL_SIZES, default=DEFAULT_K_AGF)

        return parser.parse_args(argv)

    def _load_config(self, args: argparse.Namespace):
        """Load configuration from arguments, falling back to environment variables"""
        values = {k: v for k, v in vars(args).items() if k in RunConfig.__dataclass_fields__}
        if isinstance(values.get('shape'), str):
            values['shape'] = parse_shape(values['shape'])
        if isinstance(values.get('init'), str):
            values['init'] = InitScheme.parse(values['init'])
        for key in ('dtype', 'threads', 'log_file'):
            if values.get(key) is None:
                values.pop(key, None)
        self.config = RunConfig(**values)

        env_mappings = {
            THREADS_ENV: 'threads',
            DTYPE_ENV: 'dtype',
            LOG_FILE_ENV: 'log_file',
        }
        if self.config.command not in DTYPE_COMMANDS:
            del env_mappings[DTYPE_ENV]
        for env_var, config_key in env_mappings.items():
            if getattr(args, config_key, None) is None and os.getenv(env_var):
                value = os.environ[env_var]
                if config_key == 'threads':
                    try:
                        value = int(value)
                    except ValueError:
                        raise UsageError(f"{env_var}={value!r} is not an integer")
                setattr(self.config, config_key, value)
                self._print_status(f"Using {config_key} from environment: {value}", "INFO")

        if self.config.dtype not in DTYPES:
            raise UsageError(f"Unsupported dtype {self.config.dtype!r}; expected one of {sorted(DTYPES)}")
        if self.config.threads is not None and self.config.threads < 1:
            raise UsageError(f"threads must be >= 1, got {self.config.threads}")
        if self.config.command == 'bench' and self.config.iters < 1:
            raise UsageError(f"--iters must be >= 1, got {self.config.iters}")

    def _build_module(self, method: str, latent: Tensor) -> FusionModule:
        cfg = self.config
        if cfg.weights:
            module = load_params(cfg.weights)
            if module.method != method:
                raise ManifestError(f"{cfg.weights} holds {module.method} parameters, not {method}")
            if method == "agf" and cfg.k_agf is not None and cfg.k_agf != module.conv.kernel_size:
                self._print_status(
                    f"--k-agf {cfg.k_agf} ignored; manifest kernel size is {module.conv.kernel_size}", "WARNING"
                )
            return module
        spec = FusionSpec(method, latent.c, cfg.k_agf or DEFAULT_K_AGF)
        return init_params(spec, cfg.init, dtype=latent.dtype)

    def cmd_gen_latent(self) -> int:
        cfg = self.config
        spec = SynthSpec(kind=cfg.kind, shape=cfg.shape, seed=cfg.seed, amplitude=cfg.amplitude, dtype=cfg.dtype)
        if cfg.kind == "structured-pair":
            outputs = list(zip(pair_paths(cfg.out), generate_pair(spec)))
        else:
            outputs = [(Path(cfg.out), generate(spec))]

        for path, tensor in outputs:
            write_latent(tensor, path)
            self._emit(file=path, shape=format_shape(tensor.shape), dtype=dtype_name(tensor.dtype))
            self._emit_stats(tensor)
        self._print_status(f"Wrote {len(outputs)} latent file(s)", "SUCCESS")
        return EXIT_OK

    def _emit_stats(self, t: Tensor) -> int:
        nonfinite = 0
        for row in channel_stats(t):
            nonfinite += row["nonfinite"]
            self._emit(**row)
        self._emit(nonfinite=nonfinite)
        return nonfinite

    def cmd_fuse(self) -> int:
        cfg = self.config
        base = read_latent(cfg.base)
        refined = read_latent(cfg.refined)

        if cfg.method in PASSTHROUGH_METHODS:
            if cfg.maps_out or cfg.init or cfg.weights or cfg.save_weights:
                raise UsageError(f"--method {cfg.method} takes no parameters and produces no maps")
            if base.shape != refined.shape:
                raise ShapeMismatchError(f"base {base.shape} and refined {refined.shape} differ")
            fused = base if cfg.method == "base" else refined
            self._emit(method=cfg.method, shape=format_shape(fused.shape), dtype=dtype_name(fused.dtype))
        else:
            if (cfg.init is None) == (cfg.weights is None):
                raise UsageError("fuse needs exactly one of --init or --weights")
            module = self._build_module(cfg.method, base)
            result = fuse(module, base, refined, impl=cfg.impl)
            fused = result.fused
            self._emit(
                method=cfg.method,
                shape=format_shape(fused.shape),
                dtype=dtype_name(fused.dtype),
                kernel_size=module.conv.kernel_size,
                threads=get_num_threads(),
            )
            if cfg.maps_out:
                write_latent(result.maps, cfg.maps_out)
                self._emit(maps=cfg.maps_out, maps_shape=format_shape(result.maps.shape))
            if cfg.save_weights:
                save_params(module, cfg.save_weights)
                self._emit(weights_manifest=cfg.save_weights)

        write_latent(fused, cfg.out)
        self._emit(file=cfg.out)
        self._emit_stats(fused)
        self._print_status(f"Fused latent written to {cfg.out}", "SUCCESS")
        return EXIT_OK

    def cmd_stats(self) -> int:
        t = read_latent(self.config.input)
        self._emit(file=self.config.input, shape=format_shape(t.shape), dtype=dtype_name(t.dtype))
        nonfinite = self._emit_stats(t)
        if nonfinite:
            self._print_status(f"{nonfinite} NaN/Inf values in {self.config.input}", "ERROR")
            return EXIT_DATA_ERROR
        return EXIT_OK

    def cmd_gradcheck(self) -> int:
        cfg = self.config
        report = check_module(
            cfg.method, cfg.shape, cfg.seed, eps=cfg.eps, threshold=cfg.threshold, k_agf=cfg.k_agf, init=cfg.init
        )
        for line in report.lines():
            print(line, file=self.stdout)
        if report.passed:
            self._print_status("Gradient check passed", "SUCCESS")
            return EXIT_OK
        self._print_status(f"Gradient check failed in {report.worst.name}", "ERROR")
        return EXIT_DATA_ERROR

    def _bench_case(self):
        """Returns (callable producing the output, MAC count, bias additions)."""
        cfg = self.config
        n, c, h, w = cfg.shape
        if cfg.op in BENCH_CONV_OUT_CHANNELS:
            k = 1 if cfg.op == "conv1x1" else 7
            out_channels = BENCH_CONV_OUT_CHANNELS[cfg.op]
            x = generate(SynthSpec("noise", cfg.shape, seed=cfg.seed, dtype=cfg.dtype))
            conv = Conv2dParams(
                rng.uniform(cfg.seed, rng.WEIGHTS, (out_channels, c, k, k), -0.1, 0.1).astype(x.dtype),
                rng.uniform(cfg.seed, rng.BIAS, (out_channels,), -0.1, 0.1).astype(x.dtype),
            )
            return (lambda: conv2d(x, conv, cfg.impl)), conv_macs(cfg.shape, conv), n * h * w * out_channels

        base, refined = generate_pair(SynthSpec("structured-pair", cfg.shape, seed=cfg.seed, dtype=cfg.dtype))
        module = init_params(FusionSpec(cfg.op, c, cfg.k_agf), InitScheme("uniform", 0.1, cfg.seed), dtype=base.dtype)
        conv_input = (n, 2 * c, h, w) if cfg.op == "agf" else (n, 2, h, w)
        bias_adds = n * h * w * module.conv.out_channels
        return (lambda: fuse(module, base, refined, cfg.impl).fused), conv_macs(conv_input, module.conv), bias_adds

    def cmd_bench(self) -> int:
        cfg = self.config
        run, macs, bias_adds = self._bench_case()
        timings = []
        out = None
        for _ in range(cfg.iters):
            start = time.perf_counter()
            out = run()
            timings.append(time.perf_counter() - start)
        sec_per_iter = sum(timings) / len(timings)
        self._emit(
            op=cfg.op,
            impl=cfg.impl,
            shape=format_shape(cfg.shape),
            dtype=cfg.dtype,
            iters=cfg.iters,
            threads=get_num_threads(),
        )
        self._emit(macs=macs, bias_adds=bias_adds)
        self._emit(sec_per_iter=sec_per_iter, best_sec=min(timings), gmacs_per_sec=macs / sec_per_iter / 1e9)
        self._emit(checksum=checksum(out))
        return EXIT_OK

    def cmd_compare(self) -> int:
        cfg = self.config
        base = read_latent(cfg.base)
        refined = read_latent(cfg.refined)
        arms = [("base", base), ("refined", refined)]
        for method in FUSION_METHODS:
            spec = FusionSpec(method, base.c, cfg.k_agf)
            module = init_params(spec, cfg.init, dtype=base.dtype)
            arms.append((method, fuse(module, base, refined).fused))

        b64, r64 = base.data.astype(np.float64), refined.data.astype(np.float64)
        for name, fused in arms:
            f64 = fused.data.astype(np.float64)
            self._emit(
                arm=name,
                mad_base=float(np.abs(f64 - b64).mean()),
                mad_refined=float(np.abs(f64 - r64).mean()),
                detail_energy=detail_energy(fused),
            )
        return EXIT_OK

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """Main entry: returns the process exit code"""
        try:
            args = self._parse_arguments(argv)
        except SystemExit as e:
            # argparse already printed usage
            return EXIT_OK if e.code == 0 else EXIT_USAGE_ERROR

        try:
            self._load_config(args)
            level = logging.ERROR if self.config.quiet else logging.DEBUG if self.config.verbose else logging.WARNING
            self._setup_logging(self.config.log_file, level)
            set_num_threads(self.config.threads)

            handler = {
                'gen-latent': self.cmd_gen_latent,
                'fuse': self.cmd_fuse,
                'stats': self.cmd_stats,
                'gradcheck': self.cmd_gradcheck,
                'bench': self.cmd_bench,
                'compare': self.cmd_compare,
            }[self.config.command]
            return handler()

        except KeyboardInterrupt:
            self._print_status("Interrupted by user", "WARNING")
            return EXIT_INTERRUPTED
        except (UsageError, InvalidSpecError, GradCheckCapError) as e:
            self._print_status(f"Usage error: {e}", "ERROR")
            return EXIT_USAGE_ERROR
        except (LatfuseError, OSError) as e:
            self._print_status(f"{type(e).__name__}: {e}", "ERROR")
            return EXIT_DATA_ERROR
        except Exception as e:
            self._print_status(f"Unexpected error: {e}", "ERROR")
            self.logger.exception("Unexpected error occurred")
            return EXIT_DATA_ERROR
        finally:
            set_num_threads(None)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    return LatfuseRunner().run(argv)
