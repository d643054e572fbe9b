"""Command-line interface: one verb per pipeline stage, plus presets.

Verbs: gen-data, train, distill, dmd, cd, audit, preset, report.  Every
pipeline verb accepts the same configuration flags (mirroring
ExperimentConfig fields) plus --config pointing at a JSON document; values
from the document override flags, which override built-in defaults.

Exit codes: 0 success, 1 failed run-level assertion or diverged training,
2 usage or configuration error, 3 I/O or file-format error.

Stage seeds are fixed offsets from the master seed (datasets +1/+2, models
+11, diffusion +21, distillation +22, consistency +24, distribution
matching +31), so verbs invoked separately line up with the preset
pipelines.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import (
    ExperimentConfig,
    component_tables,
    named_distribution,
)
from .diagnostics import (
    df_mismatch,
    df_mismatch_oracle,
    injectivity_variance,
    injectivity_variance_oracle,
)
from .errors import (
    ConfigError,
    DatasetFormatError,
    DivergenceError,
    GridError,
    PresetCheckError,
)
from .models import TrainConfig, copy_head, make_chunk_models
from .ode import make_pairs_bi, make_pairs_causal
from .presets import PRESET_NAMES, run_all_presets, run_preset
from .stages import (
    cd_train,
    dmd_train,
    ode_distill,
    train_ar_diffusion_df,
    train_ar_diffusion_tf,
)
from .storage import (
    emit_report,
    load_dataset,
    read_report_csv,
    save_dataset,
    save_loss_trace,
    save_models,
)

#: (ExperimentConfig field, argparse dest) pairs for the shared flags
_FIELD_FLAGS = (
    ("n_frames", "n_frames"),
    ("frame_dim", "frame_dim"),
    ("chunk_size", "chunk_size"),
    ("grid", "grid"),
    ("solver_steps", "solver_steps"),
    ("diffusion", "diffusion"),
    ("ode", "ode"),
    ("dmd", "dmd"),
    ("cd", "cd"),
    ("d2_init", "d2_init"),
    ("d3_init", "d3_init"),
    ("dmd_fresh_init", "dmd_fresh_init"),
    ("feature_count", "feature_count"),
    ("frequency_scale", "frequency_scale"),
    ("dataset_size", "dataset_size"),
    ("master_seed", "master_seed"),
    ("output_dir", "output_dir"),
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuration")
    group.add_argument("--config", metavar="PATH",
                       help="JSON config document; its values override flags")
    group.add_argument("--distribution", choices=("bivariate", "ar1", "two-mode"),
                       help="named lab distribution; fills components and layout")
    group.add_argument("--rho", type=float, help="bivariate correlation")
    group.add_argument("--corr", type=float, help="ar1 frame correlation")
    group.add_argument("--separation", type=float, help="two-mode mode offset")
    group.add_argument("--components", metavar="JSON",
                       help="mixture component tables as a JSON list")
    group.add_argument("--n-frames", type=int, dest="n_frames")
    group.add_argument("--frame-dim", type=int, dest="frame_dim")
    group.add_argument("--chunk-size", type=int, dest="chunk_size")
    group.add_argument("--grid", metavar="T1,T2,...",
                       help="few-step grid times, comma separated")
    group.add_argument("--solver-steps", type=int, dest="solver_steps")
    group.add_argument("--diffusion", choices=("tf", "df"))
    group.add_argument("--ode", choices=("asymmetric-ode", "causal-ode", "none"))
    group.add_argument("--dmd", choices=("dmd", "none"))
    group.add_argument("--cd", choices=("causal-cd", "asymmetric-cd", "none"))
    group.add_argument("--d2-init", action="store_true", default=None,
                       dest="d2_init")
    group.add_argument("--d3-init", action="store_true", default=None,
                       dest="d3_init")
    group.add_argument("--dmd-fresh-init", action="store_true", default=None,
                       dest="dmd_fresh_init")
    group.add_argument("--feature-count", type=int, dest="feature_count")
    group.add_argument("--frequency-scale", type=float, dest="frequency_scale")
    group.add_argument("--dataset-size", type=int, dest="dataset_size")
    group.add_argument("--master-seed", type=int, dest="master_seed")
    group.add_argument("--output-dir", dest="output_dir")


def _distribution_overrides(args) -> dict:
    """Expand --distribution (+ its parameter flags) into config fields."""
    if args.distribution is None:
        return {}
    params = {}
    if args.distribution == "bivariate" and args.rho is not None:
        params["rho"] = args.rho
    if args.distribution == "ar1":
        if args.corr is not None:
            params["corr"] = args.corr
        if args.n_frames is not None:
            params["n_frames"] = args.n_frames
        if args.chunk_size is not None:
            params["chunk_size"] = args.chunk_size
    if args.distribution == "two-mode" and args.separation is not None:
        params["separation"] = args.separation
    dist = named_distribution(args.distribution, **params)
    spec = dist.spec
    return {
        "components": component_tables(dist),
        "n_frames": spec.n_frames,
        "frame_dim": spec.frame_dim,
        "chunk_size": spec.chunk_size,
    }


def gather_overrides(args) -> dict:
    """Explicitly-set flags as a config fragment (defaults stay absent)."""
    overrides = dict(_distribution_overrides(args))
    for field_name, attr in _FIELD_FLAGS:
        value = getattr(args, attr, None)
        if value is not None:
            overrides[field_name] = value
    if getattr(args, "components", None) is not None:
        try:
            overrides["components"] = json.loads(args.components)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--components is not valid JSON: {exc}")
    if "grid" in overrides and isinstance(overrides["grid"], str):
        try:
            overrides["grid"] = tuple(
                float(part) for part in overrides["grid"].split(",")
            )
        except ValueError:
            raise ConfigError(f"--grid must be comma-separated floats")
    if getattr(args, "config", None) is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                document = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config} is not valid JSON: {exc}")
        if not isinstance(document, dict):
            raise ConfigError("config document must be a JSON object")
        overrides.update(document)
    return overrides


def build_config(args) -> ExperimentConfig:
    return ExperimentConfig.from_dict(gather_overrides(args))


def _out_root(config: ExperimentConfig) -> Path:
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    return root


# ---------------------------------------------------------------------------
# verb implementations
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    config = build_config(args)
    if config.ode == "none":
        raise ConfigError("gen-data needs an ode stage: asymmetric-ode builds "
                          "jointly-integrated pairs, causal-ode chunk-wise ones")
    dist = config.distribution()
    grid = config.timestep_grid()
    root = _out_root(config)
    if config.ode == "asymmetric-ode":
        dataset = make_pairs_bi(dist, grid, count=config.dataset_size,
                                steps=config.solver_steps,
                                seed=config.master_seed + 1)
        path = root / "pairs_bidirectional.jsonl"
    else:
        dataset = make_pairs_causal(dist, grid, count=config.dataset_size,
                                    steps=config.solver_steps,
                                    seed=config.master_seed + 2)
        path = root / "pairs_causal.jsonl"
    save_dataset(dataset, path)
    print(f"wrote {len(dataset.records)} pairs to {path}")
    return 0


def _cmd_train(args) -> int:
    config = build_config(args)
    dist = config.distribution()
    models = make_chunk_models(
        config.sequence_spec(), role="ar-velocity", m=config.feature_count,
        seed=config.master_seed + 11, frequency_scale=config.frequency_scale,
    )
    trainer = train_ar_diffusion_tf if config.diffusion == "tf" else train_ar_diffusion_df
    result = trainer(dist, models, config.train["diffusion"],
                     seed=config.master_seed + 21)
    root = _out_root(config)
    save_models(models, root / "models_velocity.jsonl")
    save_loss_trace(result.loss_trace, root / "diffusion_trace.csv")
    print(f"trained {config.diffusion} denoisers; final loss "
          f"{result.loss_trace[-1]:.6g}; wrote {root / 'models_velocity.jsonl'}")
    return 0


def _dataset_path(config: ExperimentConfig, args) -> Path:
    if args.data is not None:
        return Path(args.data)
    name = ("pairs_bidirectional.jsonl" if config.ode == "asymmetric-ode"
            else "pairs_causal.jsonl")
    return Path(config.output_dir) / name


def _cmd_distill(args) -> int:
    config = build_config(args)
    if config.ode == "none":
        raise ConfigError("distill needs an ode stage toggle to pick its data")
    dataset = load_dataset(_dataset_path(config, args))
    students = make_chunk_models(
        config.sequence_spec(), role="generator", m=config.feature_count,
        seed=config.master_seed + 11, frequency_scale=config.frequency_scale,
        parameterization="anchored",
    )
    result = ode_distill(dataset, students, config.train["distill"],
                         seed=config.master_seed + 22)
    root = _out_root(config)
    save_models(students, root / "models_generator.jsonl")
    save_loss_trace(result.loss_trace, root / "distill_trace.csv")
    print(f"distilled {config.ode} generators from "
          f"{len(dataset.records)} pairs; wrote {root / 'models_generator.jsonl'}")
    return 0


def _cmd_dmd(args) -> int:
    config = build_config(args)
    if config.dmd == "none":
        raise ConfigError("dmd verb requires dmd=dmd in the configuration")
    dist = config.distribution()
    grid = config.timestep_grid()
    root = _out_root(config)
    generators = make_chunk_models(
        config.sequence_spec(), role="generator", m=config.feature_count,
        seed=config.master_seed + 11, frequency_scale=config.frequency_scale,
        parameterization="anchored",
    )
    if config.d2_init:
        velocities = make_chunk_models(
            config.sequence_spec(), role="ar-velocity", m=config.feature_count,
            seed=config.master_seed + 11, frequency_scale=config.frequency_scale,
        )
        trainer = (train_ar_diffusion_tf if config.diffusion == "tf"
                   else train_ar_diffusion_df)
        trainer(dist, velocities, config.train["diffusion"],
                seed=config.master_seed + 21)
        copy_head(velocities, generators)
        source = "denoiser head"
    elif config.ode != "none":
        from .storage import load_models

        generators = load_models(root / "models_generator.jsonl")
        source = "distilled checkpoint"
    else:
        source = "fresh (identity map)"
    fakes = make_chunk_models(
        config.sequence_spec(), role="fake-score",
        m=max(32, config.feature_count // 2),
        seed=config.master_seed + 13, frequency_scale=config.frequency_scale,
        parameterization="anchored",
    )
    result = dmd_train(generators, fakes, dist, grid, config.train["dmd"],
                       seed=config.master_seed + 31)
    save_models(generators, root / "models_dmd.jsonl")
    save_loss_trace(result.loss_trace, root / "dmd_trace.csv")
    print(f"distribution matching from {source}; final score gap "
          f"{result.loss_trace[-1]:.6g}; wrote {root / 'models_dmd.jsonl'}")
    return 0


def _cmd_cd(args) -> int:
    config = build_config(args)
    if config.cd == "none":
        raise ConfigError("cd verb requires a causal-cd or asymmetric-cd toggle")
    dist = config.distribution()
    teacher_kind = ("autoregressive" if config.cd == "causal-cd"
                    else "bidirectional")
    students = make_chunk_models(
        config.sequence_spec(), role="generator", m=config.feature_count,
        seed=config.master_seed + 11, frequency_scale=config.frequency_scale,
        parameterization="anchored",
    )
    result = cd_train(dist, students, config.train["cd"],
                      seed=config.master_seed + 24, grid_size=args.cd_cells,
                      teacher_kind=teacher_kind)
    root = _out_root(config)
    save_models(students, root / "models_consistency.jsonl")
    save_loss_trace(result.loss_trace, root / "cd_trace.csv")
    print(f"consistency training ({teacher_kind} teacher, {args.cd_cells} "
          f"cells); wrote {root / 'models_consistency.jsonl'}")
    return 0


def _cmd_audit(args) -> int:
    config = build_config(args)
    dist = config.distribution()
    reports = []
    failures = []
    if args.kind in ("injectivity", "both"):
        report = injectivity_variance(dist, 1, t=args.time,
                                      n_anchor=args.anchors,
                                      n_resample=args.resamples,
                                      seed=config.master_seed + 1)
        if len(dist.components) == 1:
            oracle = injectivity_variance_oracle(dist, 1, args.time)
            report.add("oracle_variance", oracle, 0.0, 1,
                       note="closed form, single Gaussian")
            mean = report.metrics["mean_variance"].value
            if oracle < 1e-12:
                if not mean < 1e-3:
                    failures.append("injectivity variance should vanish")
            elif abs(mean - oracle) > 0.1 * oracle:
                failures.append("injectivity variance off oracle by >10%")
        reports.append(report)
    if args.kind in ("df-mismatch", "both"):
        report = df_mismatch(dist, 2, args.time, n=args.resamples,
                             seed=config.master_seed + 2)
        oracle = df_mismatch_oracle(dist, 2, args.time)
        report.add("oracle_kl", oracle, 0.0, 1, note="analytic expectation")
        entry = report.metrics["expected_kl"]
        if abs(entry.value - oracle) > 3.0 * entry.uncertainty + 1e-9:
            failures.append("df mismatch KL off oracle by >3 standard errors")
        reports.append(report)
    digest = config.digest()
    for report in reports:
        report.config_digest = digest
    root = _out_root(config)
    emit_report(reports, "csv", root / "audit_report.csv")
    emit_report(reports, "structured-text", root / "audit_report.txt")
    print(f"wrote {root / 'audit_report.csv'}")
    for failure in failures:
        print(f"audit check failed: {failure}", file=sys.stderr)
    return 1 if failures else 0


def _cmd_preset(args) -> int:
    overrides = gather_overrides(args)
    output_dir = overrides.pop("output_dir", "runs")
    if args.name == "all":
        results = run_all_presets(output_dir=output_dir)
        for result in results:
            print(f"{result.name}: {len(result.checks)} checks passed "
                  f"-> {result.path}")
        return 0
    result = run_preset(args.name, output_dir=output_dir,
                        overrides=overrides or None)
    for check in result.checks:
        print(f"{result.name}: {check}: pass")
    print(f"artifacts in {result.path}")
    return 0


def _cmd_report(args) -> int:
    reports = read_report_csv(args.path)
    ordered = [reports[name] for name in sorted(reports)]
    if args.out is not None:
        emit_report(ordered, args.format, args.out)
        print(f"wrote {args.out}")
        return 0
    for report in ordered:
        for metric in sorted(report.metrics):
            entry = report.metrics[metric]
            line = f"{report.name}.{metric} = {entry.value!r}"
            if entry.uncertainty:
                line += f" +- {entry.uncertainty!r}"
            print(line)
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ardlab",
        description="Autoregressive-diffusion distillation lab: pipeline "
                    "stages, oracle audits, and preset experiments.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="integrate and store ODE pair datasets")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train per-chunk denoisers (tf or df)")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("distill", help="regress few-step generators onto stored pairs")
    _add_config_flags(p)
    p.add_argument("--data", metavar="PATH",
                   help="pair dataset (default: the gen-data output path)")
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("dmd", help="distribution-matching generator updates")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_dmd)

    p = sub.add_parser("cd", help="consistency training on a uniform grid")
    _add_config_flags(p)
    p.add_argument("--cd-cells", type=int, default=12,
                   help="uniform grid cell count (default 12)")
    p.set_defaults(func=_cmd_cd)

    p = sub.add_parser("audit", help="oracle-backed diagnostics with pass/fail")
    _add_config_flags(p)
    p.add_argument("--kind", choices=("injectivity", "df-mismatch", "both"),
                   default="both")
    p.add_argument("--time", type=float, default=0.5,
                   help="noise level t for the audits (default 0.5)")
    p.add_argument("--anchors", type=int, default=24)
    p.add_argument("--resamples", type=int, default=3000)
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("preset", help="run a canned experiment end to end")
    p.add_argument("name", choices=PRESET_NAMES + ("all",))
    _add_config_flags(p)
    p.set_defaults(func=_cmd_preset)

    p = sub.add_parser("report", help="print or re-emit a stored report")
    p.add_argument("path", help="report CSV produced by another verb")
    p.add_argument("--format", choices=("csv", "structured-text"),
                   default="structured-text")
    p.add_argument("--out", metavar="PATH",
                   help="write instead of printing to stdout")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GridError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (PresetCheckError, DivergenceError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    except DatasetFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
