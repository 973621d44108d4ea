"""Batch entry point: config-driven generation, compression, and evaluation.

Exit codes: 0 ok, 2 config error, 3 data error, 4 internal error. Every
failure prints a single machine-parsable line ``error:<kind>: <message>``
to stderr. Result tables are byte-deterministic for a given config; wall
times are never written into them (the bench subcommand keeps its own
file).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .cache import DumpFormatError, ValidationError, load_dump, save_dump
from .compression import (
    BASES,
    CompressionPolicy,
    compress_cache,
    compression_report,
    load_compressed_dump,
    save_compressed_dump,
)
from .evaluation import bench_stage_timings, evaluate_cache, mixing_overhead
from .redundancy import head_redundancy_fast, head_redundancy_naive
from .scoring import DEFAULT_EPS
from .synth import (
    SynthHeadParams,
    gen_cache,
    gen_eval_queries,
    override_grid,
    params_from_dict,
    uniform_grid,
)

RESULT_COLUMNS = (
    "policy", "mix", "budget", "seed", "layer", "head",
    "r_bar", "fidelity_l2", "fidelity_cos", "coverage_gap", "memory_ratio",
)
TIMING_COLUMNS = ("policy", "mix", "budget", "seed", "stage", "median_s", "samples_s")


class ConfigError(Exception):
    """Bad or missing configuration; exit code 2."""


class DataError(Exception):
    """Bad input data (dumps, caches, lineage); exit code 3."""


@dataclass
class ExperimentConfig:
    generator: dict
    n_layers: int
    n_heads: int
    policies: list[dict]
    budgets: list[int]
    seeds: list[int]
    eval_queries: int = 16
    eval_query_seed: Optional[int] = None
    output_dir: str = "out"
    eps: float = DEFAULT_EPS
    workers: int = 1
    overrides: list[dict] = field(default_factory=list)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        gen = dict(raw.get("generator") or {})
        for key in ("L", "H"):
            if not isinstance(gen.get(key), int) or gen[key] < 1:
                raise ConfigError(f"generator.{key} must be a positive integer")
        n_layers = gen.pop("L")
        n_heads = gen.pop("H")
        overrides = gen.pop("overrides", [])

        policies = raw.get("policies")
        if not policies or not isinstance(policies, list):
            raise ConfigError("config needs a non-empty 'policies' list")
        for p in policies:
            if not isinstance(p, dict) or p.get("base") not in BASES:
                raise ConfigError(f"each policy needs a 'base' from {BASES}, got {p!r}")

        budgets = raw.get("budgets", [64, 128, 256])
        if not budgets or any(not isinstance(b, int) or b < 1 for b in budgets):
            raise ConfigError("'budgets' must be a non-empty list of integers >= 1")

        seeds = raw.get("seeds")
        if not seeds or any(not isinstance(s, int) or s < 0 for s in seeds):
            raise ConfigError("config needs a non-empty 'seeds' list of integers >= 0")

        cfg = cls(
            generator=gen,
            n_layers=n_layers,
            n_heads=n_heads,
            policies=[dict(p) for p in policies],
            budgets=list(budgets),
            seeds=list(seeds),
            eval_queries=raw.get("eval_queries", 16),
            eval_query_seed=raw.get("eval_query_seed"),
            output_dir=raw.get("output_dir", "out"),
            eps=raw.get("eps", DEFAULT_EPS),
            workers=raw.get("workers", 1),
            overrides=list(overrides),
        )
        if cfg.eval_queries < 1:
            raise ConfigError("'eval_queries' must be >= 1")
        if cfg.workers < 1:
            raise ConfigError("'workers' must be >= 1")
        cfg.head_params(cfg.seeds[0])  # validate generator fields early
        return cfg

    def head_params(self, seed: int) -> SynthHeadParams:
        try:
            return params_from_dict({**self.generator, "seed": seed})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad generator config: {exc}") from exc

    def grid(self, seed: int):
        grid = uniform_grid(self.head_params(seed), self.n_layers, self.n_heads)
        try:
            return override_grid(grid, self.overrides)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad generator override: {exc}") from exc

    def policy(self, spec: dict, budget: int, window_len: int) -> CompressionPolicy:
        try:
            return CompressionPolicy(
                **{**spec, "budget": budget, "window_len": window_len, "eps": self.eps})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad policy {spec!r}: {exc}") from exc


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _policy_name(spec: dict) -> str:
    return spec["base"]


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _write_rows(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def cmd_generate(cfg: ExperimentConfig, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for seed in cfg.seeds:
        cache, windows = gen_cache(cfg.grid(seed))
        path = out_dir / f"cache_seed{seed}.kvd"
        labels = {"generator": {**cfg.generator, "L": cfg.n_layers, "H": cfg.n_heads}}
        save_dump(cache, windows, path, seed=seed, labels=labels)
        paths.append(path)
    return paths


def cmd_compress(
    dump_path, policy_spec: dict, budget: int, out_path, report_path=None
) -> Path:
    try:
        loaded = load_dump(dump_path)
    except (OSError, DumpFormatError) as exc:
        raise DataError(f"cannot load dump {dump_path}: {exc}") from exc
    if loaded.violations:
        raise DataError(
            f"dump {dump_path} fails validation: {loaded.violations[0].detail}")
    window_len = loaded.manifest["window_len"]
    try:
        policy = CompressionPolicy(
            **{**policy_spec, "budget": budget, "window_len": window_len})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad policy: {exc}") from exc
    try:
        compressed = compress_cache(loaded.cache, loaded.windows, policy)
    except (ValueError, ValidationError) as exc:
        raise DataError(str(exc)) from exc
    labels = {
        "source_sha256": _sha256(dump_path),
        "source_seed": loaded.manifest.get("seed"),
    }
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_compressed_dump(compressed, out_path, seed=loaded.manifest.get("seed"), labels=labels)
    if report_path is not None:
        Path(report_path).write_text(compression_report(compressed), encoding="utf-8")
    return out_path


def cmd_eval(original_path, compressed_path, query_seed: int, n_queries: int, out_path) -> int:
    try:
        loaded = load_dump(original_path)
        compressed, manifest = load_compressed_dump(compressed_path)
    except (OSError, DumpFormatError) as exc:
        raise DataError(str(exc)) from exc

    recorded = (manifest.get("labels") or {}).get("source_sha256")
    actual = _sha256(original_path)
    if recorded != actual:
        raise DataError(
            f"lineage mismatch: compressed dump records source {recorded}, "
            f"but {original_path} hashes to {actual}")

    gen_labels = (loaded.manifest.get("labels") or {}).get("generator") or {}
    params = params_from_dict({
        "seq_len": loaded.manifest["T"],
        "dim": loaded.manifest["D"],
        "window_len": loaded.manifest["window_len"],
        **{k: v for k, v in gen_labels.items() if k not in ("L", "H")},
        "seed": query_seed,
    })
    queries = gen_eval_queries(params, n_queries)

    _, head_rows = evaluate_cache(loaded.cache, compressed, queries)
    policy = compressed.policy
    run_id = hashlib.sha256(
        f"{actual}:{recorded}:{_sha256(compressed_path)}:{query_seed}:{n_queries}".encode()
    ).hexdigest()[:16]

    out_path = Path(out_path)
    marker = f"# run {run_id}\n"
    if out_path.exists():
        text = out_path.read_text(encoding="utf-8")
        if marker in text:
            return 0
        new_file = False
    else:
        new_file = True
    with open(out_path, "a", encoding="utf-8") as fh:
        if new_file:
            fh.write("\t".join(RESULT_COLUMNS) + "\n")
        fh.write(marker)
        for row in head_rows:
            fh.write("\t".join(_fmt(v) for v in (
                policy.base, policy.mix, policy.budget, manifest.get("seed"),
                row["layer"], row["head"], row["r_bar"], row["fidelity_l2"],
                row["fidelity_cos"], row["coverage_gap"], row["memory_ratio"],
            )) + "\n")
    return len(head_rows)


def _compare_cell(cfg: ExperimentConfig, seed: int):
    """All per-head metric rows for one seed of the config grid."""
    cache, windows = gen_cache(cfg.grid(seed))
    queries = gen_eval_queries(
        cfg.head_params(cfg.eval_query_seed if cfg.eval_query_seed is not None else seed),
        cfg.eval_queries)
    window_len = cache.window_len
    rows = []
    for p_idx, spec in enumerate(cfg.policies):
        for budget in cfg.budgets:
            policy = cfg.policy(spec, budget, window_len)
            compressed = compress_cache(cache, windows, policy)
            _, head_rows = evaluate_cache(cache, compressed, queries, cfg.eps)
            for row in head_rows:
                rows.append((
                    (seed, p_idx, budget, row["layer"], row["head"]),
                    (_policy_name(spec), policy.mix, budget, seed,
                     row["layer"], row["head"], row["r_bar"], row["fidelity_l2"],
                     row["fidelity_cos"], row["coverage_gap"], row["memory_ratio"]),
                ))
    return rows


def cmd_compare(cfg: ExperimentConfig, out_dir, workers: Optional[int] = None) -> tuple[Path, Path]:
    """Run the full policy x budget x seed grid and write the result tables.

    results.tsv holds one row per head per grid cell; summary.tsv holds the
    per-policy aggregates and blend-on vs blend-off win rates. Both files
    are byte-identical across reruns and worker counts.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_workers = workers if workers is not None else cfg.workers

    keyed = []
    if n_workers == 1:
        for seed in cfg.seeds:
            keyed.extend(_compare_cell(cfg, seed))
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            for cell in pool.map(lambda s: _compare_cell(cfg, s), cfg.seeds):
                keyed.extend(cell)
    keyed.sort(key=lambda kr: kr[0])
    rows = [r for _, r in keyed]

    results_path = out_dir / "results.tsv"
    _write_rows(results_path, RESULT_COLUMNS, rows)

    summary_path = out_dir / "summary.tsv"
    _write_summary(cfg, rows, summary_path)
    return results_path, summary_path


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def _write_summary(cfg: ExperimentConfig, rows, path) -> None:
    # cell means: (policy base, mix, budget, seed) -> per-metric values over heads
    by_cell: dict = {}
    for row in rows:
        base, mix, budget, seed = row[0], row[1], row[2], row[3]
        key = (base, mix, budget, seed)
        by_cell.setdefault(key, {"fidelity_l2": [], "coverage_gap": [], "fidelity_cos": [], "memory_ratio": []})
        by_cell[key]["fidelity_l2"].append(row[7])
        by_cell[key]["fidelity_cos"].append(row[8])
        by_cell[key]["coverage_gap"].append(row[9])
        by_cell[key]["memory_ratio"].append(row[10])

    lines = []
    agg_cols = ("policy", "mix", "budget", "n_seeds", "mean_fidelity_l2",
                "mean_fidelity_cos", "mean_coverage_gap", "mean_memory_ratio")
    lines.append("\t".join(agg_cols))
    combos = sorted({(k[0], k[1], k[2]) for k in by_cell})
    for base, mix, budget in combos:
        seeds = sorted(s for (b, m, bud, s) in by_cell if (b, m, bud) == (base, mix, budget))
        cells = [by_cell[(base, mix, budget, s)] for s in seeds]
        lines.append("\t".join(_fmt(v) for v in (
            base, mix, budget, len(seeds),
            _mean([_mean(c["fidelity_l2"]) for c in cells]),
            _mean([_mean(c["fidelity_cos"]) for c in cells]),
            _mean([_mean(c["coverage_gap"]) for c in cells]),
            _mean([_mean(c["memory_ratio"]) for c in cells]),
        )))

    win_cols = ("policy", "budget", "n_seeds", "coverage_win_rate", "fidelity_win_rate")
    lines.append("")
    lines.append("\t".join(win_cols))
    bases_with_both = sorted({base for base, mix, _ in combos if mix}
                             & {base for base, mix, _ in combos if not mix})
    for base in bases_with_both:
        for budget in sorted({b for (_, _, b) in combos}):
            if (base, True, budget) not in combos or (base, False, budget) not in combos:
                continue
            seeds = sorted(s for (b, m, bud, s) in by_cell if (b, m, bud) == (base, True, budget))
            cov_wins = fid_wins = 0
            for s in seeds:
                on = by_cell[(base, True, budget, s)]
                off = by_cell[(base, False, budget, s)]
                cov_wins += _mean(on["coverage_gap"]) < _mean(off["coverage_gap"])
                fid_wins += _mean(on["fidelity_l2"]) < _mean(off["fidelity_l2"])
            lines.append("\t".join(_fmt(v) for v in (
                base, budget, len(seeds), cov_wins / len(seeds), fid_wins / len(seeds))))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_redundancy_report(dump_path, out_path, use_naive: bool = False) -> Path:
    try:
        loaded = load_dump(dump_path)
    except (OSError, DumpFormatError) as exc:
        raise DataError(str(exc)) from exc
    estimator = head_redundancy_naive if use_naive else head_redundancy_fast
    rows = []
    for l in range(loaded.cache.n_layers):
        for h in range(loaded.cache.n_heads):
            red = estimator(loaded.cache.head(l, h))
            rows.append((l, h, red.r_bar, red.raw))
    out_path = Path(out_path)
    _write_rows(out_path, ("layer", "head", "r_bar", "raw"), rows)
    return out_path


def cmd_bench(dump_path, policy_spec: dict, budget: int, repetitions: int, out_path) -> float:
    try:
        loaded = load_dump(dump_path)
    except (OSError, DumpFormatError) as exc:
        raise DataError(str(exc)) from exc
    window_len = loaded.manifest["window_len"]
    try:
        policy = CompressionPolicy(
            **{**policy_spec, "budget": budget, "window_len": window_len})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad policy: {exc}") from exc
    ratio, off, on = mixing_overhead(loaded.cache, loaded.windows, policy, repetitions)
    rows = []
    for mix, timings in ((False, off), (True, on)):
        for stage, median, samples in timings.as_rows():
            rows.append((policy.base, mix, budget, loaded.manifest.get("seed"),
                         stage, median, ",".join(repr(s) for s in samples)))
    _write_rows(out_path, TIMING_COLUMNS, rows)
    with open(out_path, "a", encoding="utf-8") as fh:
        fh.write(f"# mixing_overhead_ratio\t{ratio!r}\n")
    return ratio


def _policy_spec_from_args(args) -> dict:
    spec = {"base": args.base, "mix": args.mix}
    if args.intrinsic is not None:
        spec["intrinsic_kind"] = args.intrinsic
    if getattr(args, "pyramid_slope", None) is not None:
        spec["pyramid_slope"] = args.pyramid_slope
    return spec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvcompress",
        description="Synthetic KV-cache compression experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write one dump per configured seed")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", default=None, help="output directory (default: config output_dir)")

    p_comp = sub.add_parser("compress", help="compress a dump under one policy")
    p_comp.add_argument("--dump", required=True)
    p_comp.add_argument("--base", required=True, choices=BASES)
    p_comp.add_argument("--mix", action="store_true")
    p_comp.add_argument("--intrinsic", choices=("none", "knorm", "vnorm"), default=None)
    p_comp.add_argument("--pyramid-slope", type=float, default=None, dest="pyramid_slope")
    p_comp.add_argument("--budget", type=int, required=True)
    p_comp.add_argument("--out", required=True)
    p_comp.add_argument("--report", default=None)

    p_eval = sub.add_parser("eval", help="metric rows for a compressed dump")
    p_eval.add_argument("--original", required=True)
    p_eval.add_argument("--compressed", required=True)
    p_eval.add_argument("--query-seed", type=int, default=0)
    p_eval.add_argument("--queries", type=int, default=16)
    p_eval.add_argument("--out", required=True)

    p_cmp = sub.add_parser("compare", help="full policy x budget x seed grid")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument("--workers", type=int, default=None)

    p_red = sub.add_parser("redundancy-report", help="per-head redundancy table")
    p_red.add_argument("--dump", required=True)
    p_red.add_argument("--out", required=True)
    p_red.add_argument("--naive", action="store_true")

    p_bench = sub.add_parser("bench", help="stage timings and blend overhead")
    p_bench.add_argument("--dump", required=True)
    p_bench.add_argument("--base", default="snapkv", choices=BASES)
    p_bench.add_argument("--mix", action="store_true")
    p_bench.add_argument("--intrinsic", choices=("none", "knorm", "vnorm"), default=None)
    p_bench.add_argument("--budget", type=int, default=128)
    p_bench.add_argument("--repetitions", type=int, default=5)
    p_bench.add_argument("--out", required=True)
    return parser


def _dispatch(args) -> int:
    if args.command == "generate":
        cfg = ExperimentConfig.from_file(args.config)
        paths = cmd_generate(cfg, args.out or cfg.output_dir)
        for p in paths:
            print(p)
    elif args.command == "compress":
        out = cmd_compress(args.dump, _policy_spec_from_args(args), args.budget,
                           args.out, args.report)
        print(out)
    elif args.command == "eval":
        n = cmd_eval(args.original, args.compressed, args.query_seed, args.queries, args.out)
        print(f"{n} rows")
    elif args.command == "compare":
        cfg = ExperimentConfig.from_file(args.config)
        results, summary = cmd_compare(cfg, args.out or cfg.output_dir, args.workers)
        print(results)
        print(summary)
    elif args.command == "redundancy-report":
        print(cmd_redundancy_report(args.dump, args.out, args.naive))
    elif args.command == "bench":
        ratio = cmd_bench(args.dump, _policy_spec_from_args(args), args.budget,
                          args.repetitions, args.out)
        print(f"mixing overhead ratio {ratio:.4f}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error:config: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (DataError, ValidationError, DumpFormatError) as exc:
        print(f"error:data: {_one_line(exc)}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps everything
        print(f"error:internal: {_one_line(exc)}", file=sys.stderr)
        return 4


def _one_line(exc: Exception) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    raise SystemExit(main())
