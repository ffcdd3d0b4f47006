"""Command-line entry point: ``samo memory-model | train | simulate | sweep``.

Exit codes: 0 success, 1 usage/config error, 2 verification failure or
divergence, 3 infeasible configuration.
"""

import argparse
import contextlib
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from fractions import Fraction

from . import parallel, store, training
from .pruner import dump_index_sets, load_index_sets

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_INFEASIBLE = 0, 1, 2, 3

TRAIN_CSV_COLUMNS = ["step", "loss", "grad_norm", "skipped", "peak_state_bytes"]
BREAKDOWN_COLUMNS = ["G", "G_inter", "G_data", "mode", "compute", "p2p", "bubble", "collective",
                     "overhead", "total", "status", "speedup"]
TIMELINE_COLUMNS = ["gpu", "event", "kind", "start", "end"]


class UsageError(Exception):
    pass


def _num(x):
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, int):
        return str(x)
    if isinstance(x, Fraction) and x.denominator == 1:
        return str(x.numerator)
    return repr(float(x))


@contextlib.contextmanager
def _open_out(path, mode="w"):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, mode, newline="") as fp:
            yield fp


def _load_json(path):
    try:
        with open(path) as fp:
            text = fp.read()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e}") from None
    if not text.strip():
        raise UsageError(f"{path}: empty config")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be an object")
    return doc


def _merge(cls, file_values, overrides):
    """Config-file values, then non-None flag overrides; unknown keys rejected."""
    names = {f.name for f in fields(cls)}
    unknown = set(file_values) - names
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    values = dict(file_values)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


# --- memory-model -----------------------------------------------------------

@dataclass
class MemoryConfig:
    phi: float = 1e9
    p: str = "0:1:0.05"

    def __post_init__(self):
        if self.phi < 0 or float(self.phi) != int(self.phi):
            raise ValueError("phi must be a non-negative integer")
        self.phi = int(self.phi)


def _parse_range(spec):
    parts = str(spec).split(":")
    try:
        if len(parts) == 1:
            return store.sparsity_grid(parts[0], parts[0], 1)
        if len(parts) == 3:
            return store.sparsity_grid(*parts)
    except (ValueError, ZeroDivisionError):
        pass
    raise UsageError(f"bad sparsity range {spec!r}; expected p or min:max:step within [0, 1]")


def cmd_memory_model(args):
    cfg = _merge(MemoryConfig, _load_json(args.config) if args.config else {},
                 {"phi": args.phi, "p": args.p})
    reports = [store.memory_model(cfg.phi, p) for p in _parse_range(cfg.p)]
    with _open_out(args.out) as fp:
        store.write_memory_csv(reports, fp)
    return EXIT_OK


# --- train ------------------------------------------------------------------

@dataclass
class TrainConfig:
    widths: list = field(default_factory=lambda: [16, 32, 16, 4])
    bias: bool = True
    loss: str = training.MSE
    sparsity: float = 0.9
    scope: str = "per-layer"
    steps: int = 200
    seed: int = 0
    batch_size: int = 32
    n_samples: int = 256
    data: str = None
    index_sets: str = None
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    loss_scale: float = 2.0**10
    weight_decay: float = 0.0
    verify: bool = False
    tolerance: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.sparsity < 1:
            raise ValueError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if self.steps < 0 or self.batch_size < 1 or self.n_samples < 1 or self.seed < 0:
            raise ValueError("steps >= 0, batch_size >= 1, n_samples >= 1, seed >= 0 required")
        if len(self.widths) < 2:
            raise ValueError("widths needs at least input and output sizes")

    def optimizer(self):
        return training.OptimizerConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon,
                                     self.loss_scale, self.weight_decay)


def cmd_train(args):
    overrides = {"sparsity": args.sparsity, "steps": args.steps, "seed": args.seed,
                 "scope": args.scope, "data": args.data, "index_sets": args.index_sets,
                 "tolerance": args.tolerance, "verify": True if args.verify else None}
    if args.widths:
        overrides["widths"] = [int(w) for w in args.widths.split(",")]
    cfg = _merge(TrainConfig, _load_json(args.config) if args.config else {}, overrides)
    try:
        spec = training.ModelSpec.mlp(cfg.widths, cfg.bias, cfg.loss)
        opt = cfg.optimizer()
    except ValueError as e:
        raise UsageError(str(e)) from None

    if cfg.data:
        with open(cfg.data, "rb") as fp:
            data = training.read_samd(fp)
        if data.features.shape[1] != spec.in_features or data.targets.shape[1] != spec.out_features:
            raise UsageError("dataset widths do not match the model")
    else:
        data = training.synthetic_regression(cfg.n_samples, spec.in_features, spec.out_features, cfg.seed)
    init = training.init_params(spec, cfg.seed)
    if cfg.index_sets:
        with open(cfg.index_sets) as fp:
            ind = load_index_sets(fp)
    else:
        ind = training.prune_model(spec, init, cfg.sparsity, cfg.scope)
    if args.dump_index_sets:
        with open(args.dump_index_sets, "w") as fp:
            dump_index_sets(ind, fp)

    with _open_out(args.out) as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(TRAIN_CSV_COLUMNS)
        result = training.train(spec, data, cfg.steps, ind, opt, init, cfg.batch_size,
                             on_step=lambda r: w.writerow([r.step, _num(r.loss), _num(r.grad_norm),
                                                           int(r.skipped), r.peak_state_bytes]))
    if args.checkpoint:
        with open(args.checkpoint, "w") as fp:
            store.save_checkpoint(result.state, fp)
    if result.diverged:
        print(f"diverged: non-finite loss at step {len(result.records)}", file=sys.stderr)
        return EXIT_VERIFY
    if cfg.verify:
        ref = training.train_reference_masked(spec, data, cfg.steps, ind, opt, init, cfg.batch_size)
        dev = training.max_relative_deviation(result.params, ref.params)
        loss_dev = training.max_relative_deviation([result.losses], [ref.losses]) if ref.losses else 0.0
        ok = dev <= cfg.tolerance and loss_dev <= cfg.tolerance and not ref.diverged
        print(f"verdict: {'PASS' if ok else 'FAIL'} max_rel_param_dev={dev:.3e} "
              f"max_rel_loss_dev={loss_dev:.3e} tolerance={cfg.tolerance:g}", file=sys.stderr)
        if not ok:
            return EXIT_VERIFY
    return EXIT_OK


# --- simulate / sweep -------------------------------------------------------

@dataclass
class Scenario:
    cluster: dict
    workload: dict
    mode: str = "both"
    G_inter: int = None
    G_list: list = None

    def __post_init__(self):
        if self.mode not in ("dense", "samo", "both"):
            raise ValueError(f"mode must be dense, samo or both, got {self.mode!r}")

    def modes(self):
        return ["dense", "samo"] if self.mode == "both" else [self.mode]

    def cluster_spec(self, G=None):
        d = dict(self.cluster)
        if G is not None:
            d["G"] = G
        return parallel.from_dict(parallel.ClusterSpec, d)

    def workload_spec(self):
        d = dict(self.workload)
        path = d.pop("index_sets", None)
        if path:
            with open(path) as fp:
                sets = load_index_sets(fp)
            phi = sum(s.dense_len for s in sets)
            d["phi"] = phi
            d["p"] = 1 - Fraction(sum(len(s) for s in sets), phi)
        return parallel.from_dict(parallel.WorkloadSpec, d)


def _load_scenario(path):
    if not path:
        raise UsageError("a scenario is required (--config)")
    try:
        sc = _merge(Scenario, _load_json(path), {})
        sc.workload_spec()
        sc.cluster_spec()
    except parallel.ConfigurationError as e:
        raise UsageError(str(e)) from None
    return sc


def _evaluate(sc, G):
    """Rows for one G, in mode order; speedup filled on the samo row."""
    cluster = sc.cluster_spec(G)
    work = sc.workload_spec()
    rows, results = [], {}
    for mode in sc.modes():
        try:
            b = parallel.batch_breakdown(work, cluster, mode == "samo", sc.G_inter)
        except parallel.InfeasibleError:
            rows.append([cluster.G, "", "", mode] + [""] * 6 + ["infeasible", ""])
            continue
        except parallel.ConfigurationError as e:
            rows.append([cluster.G, "", "", mode] + [""] * 6 + [f"invalid: {e}", ""])
            continue
        results[mode] = b
        rows.append([cluster.G, b.G_inter, b.G_data, mode, _num(b.compute), _num(b.p2p_send),
                     _num(b.bubble), _num(b.collective), _num(b.overhead), _num(b.total), "ok", ""])
    if "dense" in results and "samo" in results:
        speedup = (results["dense"].total - results["samo"].total) / results["dense"].total
        rows[sc.modes().index("samo")][-1] = _num(speedup)
    return rows, results


def _write_rows(rows, path):
    with _open_out(path) as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(BREAKDOWN_COLUMNS)
        w.writerows(rows)


def _write_timeline(sc, results, path):
    mode = next(m for m in sc.modes() if m in results)
    b = results[mode]
    work = sc.workload_spec()
    n = parallel.microbatches_per_gpu(work.B, work.mbs, b.G_data)
    sim = parallel.simulate_pipeline(b.G_inter, n, Fraction(work.t_f) / b.G_inter, Fraction(work.t_b) / b.G_inter)
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(TIMELINE_COLUMNS)
        for e in sim.timeline():
            w.writerow([e.gpu, "" if e.microbatch < 0 else e.microbatch, e.kind, _num(e.start), _num(e.end)])


def cmd_simulate(args):
    sc = _load_scenario(args.config)
    rows, results = _evaluate(sc, None)
    _write_rows(rows, args.out)
    if not results:
        if any(r[10] != "infeasible" for r in rows):
            raise UsageError("; ".join(r[10] for r in rows))
        print("infeasible: no mode fits the memory cap", file=sys.stderr)
        return EXIT_INFEASIBLE
    if args.timeline:
        _write_timeline(sc, results, args.timeline)
    return EXIT_OK


def _thread_cap():
    try:
        return max(1, int(os.environ.get("SAMO_THREADS", os.cpu_count() or 1)))
    except ValueError:
        raise UsageError("SAMO_THREADS must be an integer") from None


def cmd_sweep(args):
    sc = _load_scenario(args.config)
    if args.over:
        try:
            g_list = [int(g) for g in args.over.split(",")]
        except ValueError:
            raise UsageError(f"bad --over list {args.over!r}") from None
    else:
        g_list = sc.G_list or [sc.cluster_spec().G]
    try:
        for g in g_list:
            sc.cluster_spec(g)
    except parallel.ConfigurationError as e:
        raise UsageError(str(e)) from None
    with ThreadPoolExecutor(max_workers=min(_thread_cap(), len(g_list))) as pool:
        per_g = list(pool.map(lambda g: _evaluate(sc, g)[0], g_list))
    _write_rows([row for rows in per_g for row in rows], args.out)
    return EXIT_OK


# --- argument parsing -------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--out", help="output CSV path (default: stdout)")

    parser = argparse.ArgumentParser(prog="samo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("memory-model", parents=[common], help="closed-form memory savings sweep")
    p.add_argument("--phi", type=float, help="parameter count before pruning")
    p.add_argument("--p", help="sparsity value or min:max:step range")
    p.set_defaults(func=cmd_memory_model)

    p = sub.add_parser("train", parents=[common], help="compressed-state MLP training")
    p.add_argument("--seed", type=int)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--scope", choices=["per-layer", "global"])
    p.add_argument("--widths", help="comma-separated layer widths, e.g. 16,32,16,4")
    p.add_argument("--data", help="SAMD binary dataset")
    p.add_argument("--index-sets", help="JSON index sets to use instead of pruning")
    p.add_argument("--dump-index-sets", help="write the index sets used to this JSON path")
    p.add_argument("--checkpoint", help="write the final checkpoint JSON here")
    p.add_argument("--verify", action="store_true", help="compare against the dense masked reference")
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", parents=[common], help="batch-time breakdown for a scenario")
    p.add_argument("--seed", type=int, help="accepted for uniformity; the simulator is deterministic")
    p.add_argument("--timeline", help="dump the per-GPU pipeline timeline CSV here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common], help="strong-scaling sweep over GPU counts")
    p.add_argument("--seed", type=int, help="accepted for uniformity; the simulator is deterministic")
    p.add_argument("--over", help="comma-separated GPU counts")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"samo {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"samo {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
