"""Command-line entry point.

Subcommands: inspect, svd-diff, angles, restore, adv-stats, penalty, plus
`run` which executes a JSON manifest (and expands restore sweeps into one
output per grid point). Exit codes: 0 success, 2 validation failure,
3 numerical failure, 4 I/O failure.

Every command validates its inputs and finishes its computation before the
first byte of output is written. Reports are byte-deterministic for a fixed
manifest, inputs, and seed; pass --stamp to embed a timestamp.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .advantage import (
    EstimatorConfig,
    GaeParams,
    ThresholdConfig,
    histogram_table,
    read_rollout_log,
    summarize,
    verdict,
)
from .errors import ToolkitError, ValidationError
from .penalty import fit_reference, penalty_value
from .reports import write_csv, write_json
from .spectral import delta_sigma, matrix_angles
from .surgery import (
    DEFAULT_SURGERY_KINDS,
    LayerSelector,
    RankSelector,
    SelectionSpec,
    SurgeryPlan,
    run_surgery,
)
from .tensorstore import load_matrix, load_profile, open_checkpoint, resolve_keys


def _key_slug(key) -> str:
    return f"L{key.layer:03d}_{key.kind}"


def _selector_slug(text: str) -> str:
    return text.replace(":", "-").replace(",", "-")


def _prepare_out_dir(path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out

def _base_report(command: str, stamp: bool) -> dict:
    report = {"command": command, "toolkit_version": __version__}
    if stamp:
        report["generated_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return report


def _open_pair(path_a: str, path_b: str, profile_spec: str):
    """Open two checkpoints and pair their resolvable 2-D matrices."""
    ckpt_a = open_checkpoint(path_a)
    ckpt_b = open_checkpoint(path_b)
    profile = load_profile(profile_spec)
    res_a = resolve_keys(ckpt_a, profile)
    map_b = resolve_keys(ckpt_b, profile).as_dict()
    pairs = []
    for key, name_a in res_a.matched:
        if key not in map_b:
            continue
        info_a = ckpt_a.index[name_a]
        info_b = ckpt_b.index[map_b[key]]
        if len(info_a.shape) != 2:
            continue
        if info_a.shape != info_b.shape:
            raise ValidationError(
                f"{key.label}: shape {info_a.shape} in {path_a} vs {info_b.shape} in {path_b}"
            )
        pairs.append((key, name_a, map_b[key]))
    if not pairs:
        raise ValidationError(
            f"profile {profile.name!r} resolves no comparable 2-D tensors in both checkpoints"
        )
    return ckpt_a, ckpt_b, profile, pairs


# ---------------------------------------------------------------------------
# svd-diff


def run_svd_diff(params: dict) -> int:
    ckpt_a, ckpt_b, profile, pairs = _open_pair(params["a"], params["b"], params["profile"])
    results = []
    for key, name_a, name_b in pairs:
        spec = delta_sigma(load_matrix(ckpt_a, name_a), load_matrix(ckpt_b, name_b))
        results.append((key, name_a, spec))

    out_dir = _prepare_out_dir(params["out"])
    summary_rows = []
    plot_rows = []
    for key, name, spec in results:
        rows = [
            (i, float(spec.sigma_a[i]), float(spec.sigma_b[i]), float(spec.delta[i]))
            for i in range(spec.delta.shape[0])
        ]
        write_csv(
            out_dir / f"delta_sigma__{_key_slug(key)}.csv",
            ["index", "sigma_a", "sigma_b", "delta"],
            rows,
        )
        summary_rows.append(
            (key.layer, key.kind, name, spec.delta.shape[0],
             spec.max_abs, spec.mean, spec.rel_drift)
        )
        if params.get("emit_plot_data"):
            plot_rows.extend((_key_slug(key),) + row for row in rows)

    write_csv(
        out_dir / "summary.csv",
        ["layer", "kind", "tensor", "rank", "max_abs_delta", "mean_delta", "rel_drift"],
        summary_rows,
    )
    report = _base_report("svd-diff", params.get("stamp", False))
    report.update(
        {
            "inputs": {"a": str(ckpt_a.path), "b": str(ckpt_b.path), "profile": profile.name},
            "matrices": [
                {
                    "key": _key_slug(key),
                    "tensor": name,
                    "rank": int(spec.delta.shape[0]),
                    "max_abs_delta": spec.max_abs,
                    "mean_delta": spec.mean,
                    "rel_drift": spec.rel_drift,
                }
                for key, name, spec in results
            ],
            "max_abs_delta_overall": max(spec.max_abs for _, _, spec in results),
        }
    )
    write_json(out_dir / "summary.json", report)
    if params.get("emit_plot_data"):
        write_csv(
            out_dir / "plot_data.csv",
            ["matrix", "index", "sigma_a", "sigma_b", "delta"],
            plot_rows,
        )
    return 0


# ---------------------------------------------------------------------------
# angles


def run_angles(params: dict) -> int:
    ckpt_a, ckpt_b, profile, pairs = _open_pair(params["a"], params["b"], params["profile"])
    results = []
    for key, name_a, name_b in pairs:
        left, right = matrix_angles(load_matrix(ckpt_a, name_a), load_matrix(ckpt_b, name_b))
        results.append((key, name_a, left, right))

    out_dir = _prepare_out_dir(params["out"])
    summary_rows = []
    plot_rows = []
    for key, name, left, right in results:
        for spec in (left, right):
            rows = [
                (i, float(spec.cosines[i]), float(spec.angles_rad[i]), float(spec.angles_deg[i]))
                for i in range(spec.rank)
            ]
            write_csv(
                out_dir / f"angles__{_key_slug(key)}__{spec.side}.csv",
                ["index", "cosine", "angle_rad", "angle_deg"],
                rows,
            )
            summary_rows.append(
                (key.layer, key.kind, name, spec.side, spec.rank,
                 float(np.degrees(spec.min_rad)), float(np.degrees(spec.max_rad)),
                 float(np.degrees(spec.angles_rad.mean())))
            )
            if params.get("emit_plot_data"):
                plot_rows.extend((_key_slug(key), spec.side) + row for row in rows)

    write_csv(
        out_dir / "summary.csv",
        ["layer", "kind", "tensor", "side", "rank", "min_deg", "max_deg", "mean_deg"],
        summary_rows,
    )
    report = _base_report("angles", params.get("stamp", False))
    report.update(
        {
            "inputs": {"a": str(ckpt_a.path), "b": str(ckpt_b.path), "profile": profile.name},
            "matrices": [
                {
                    "key": _key_slug(key),
                    "tensor": name,
                    "side": spec.side,
                    "rank": spec.rank,
                    "min_deg": float(np.degrees(spec.min_rad)),
                    "max_deg": float(np.degrees(spec.max_rad)),
                    "mean_deg": float(np.degrees(spec.angles_rad.mean())),
                }
                for key, name, left, right in results
                for spec in (left, right)
            ],
        }
    )
    write_json(out_dir / "summary.json", report)
    if params.get("emit_plot_data"):
        write_csv(
            out_dir / "plot_data.csv",
            ["matrix", "side", "index", "cosine", "angle_rad", "angle_deg"],
            plot_rows,
        )
    return 0


# ---------------------------------------------------------------------------
# restore


def _restore_one(params: dict, layers: str, ranks: str, out_dir: Path, stamp: bool) -> None:
    donor = open_checkpoint(params["donor"])
    host = open_checkpoint(params["host"])
    profile = load_profile(params["profile"])
    kinds = tuple(params.get("kinds") or DEFAULT_SURGERY_KINDS)
    selection = SelectionSpec(
        layers=LayerSelector.parse(layers),
        ranks=RankSelector.parse(ranks),
        kinds=kinds,
    )
    plan = SurgeryPlan(
        mode=params["mode"],
        donor=donor,
        host=host,
        selection=selection,
        profile=profile,
        align=params.get("align", "none"),
    )
    stem = f"{plan.mode}__layers-{_selector_slug(layers)}__ranks-{_selector_slug(ranks)}"
    report = run_surgery(
        plan,
        out_dir / f"{stem}.safetensors",
        toolkit_version=__version__,
        force_f32=params.get("force_f32", False),
    )

    rows = [
        (
            rec.key.layer,
            rec.key.kind,
            rec.tensor,
            rec.status,
            rec.ranks_touched,
            rec.rank_lo,
            rec.rank_hi,
            rec.fro_vs_host,
            rec.fro_vs_donor,
            rec.max_entry_change,
            rec.degenerate_boundary,
        )
        for rec in report.records
    ]
    write_csv(
        out_dir / f"{stem}.report.csv",
        [
            "layer", "kind", "tensor", "status", "ranks_touched", "rank_lo", "rank_hi",
            "fro_vs_host", "fro_vs_donor", "max_entry_change", "degenerate_boundary",
        ],
        rows,
    )
    payload = _base_report("restore", stamp)
    payload.update(
        {
            "plan": report.plan,
            "output_checkpoint": str(report.out_path),
            "edited_matrices": report.edited_count,
            "records": [
                {
                    "key": rec.key.label,
                    "tensor": rec.tensor,
                    "status": rec.status,
                    "ranks_touched": rec.ranks_touched,
                    "rank_lo": rec.rank_lo,
                    "rank_hi": rec.rank_hi,
                    "fro_vs_host": rec.fro_vs_host,
                    "fro_vs_donor": rec.fro_vs_donor,
                    "max_entry_change": rec.max_entry_change,
                    "degenerate_boundary": rec.degenerate_boundary,
                }
                for rec in report.records
            ],
            "copied_tensors": report.copied_tensors,
            "write": {
                "tensors_written": report.write_report.tensors_written,
                "tensors_edited": report.write_report.tensors_edited,
                "max_rounding_error": max(
                    report.write_report.rounding_errors.values(), default=0.0
                ),
            },
        }
    )
    write_json(out_dir / f"{stem}.report.json", payload)


def run_restore(params: dict) -> int:
    sweep = params.get("sweep") or {}
    layer_specs = sweep.get("layers") or [params["layers"]]
    rank_specs = sweep.get("ranks") or [params["ranks"]]
    # parse every selector up front so a bad grid point writes nothing
    for text in layer_specs:
        LayerSelector.parse(text)
    for text in rank_specs:
        RankSelector.parse(text)
    out_dir = _prepare_out_dir(params["out"])
    for layers in layer_specs:
        for ranks in rank_specs:
            _restore_one(params, layers, ranks, out_dir, params.get("stamp", False))
    return 0


# ---------------------------------------------------------------------------
# adv-stats


def _load_thresholds(spec: str) -> ThresholdConfig:
    if spec == "default":
        return ThresholdConfig()
    path = Path(spec)
    if not path.is_file():
        raise ValidationError(f"thresholds must be 'default' or a JSON file, got {spec!r}")
    try:
        raw = json.loads(path.read_text())
        return ThresholdConfig(**raw)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ValidationError(f"malformed thresholds file {path}: {exc}") from exc


def run_adv_stats(params: dict) -> int:
    bins = params.get("bins", "fd")
    if bins != "fd":
        bins = int(bins)
    cfg = EstimatorConfig(
        bins=bins,
        bootstrap=int(params.get("bootstrap", 500)),
        seed=int(params.get("seed", 0)),
        mode_budget=int(params.get("mode_budget", 1)),
        kl_direction=params.get("kl_direction", "empirical_vs_normal"),
    )
    thresholds = _load_thresholds(params.get("thresholds", "default"))
    gae_params = GaeParams(
        gamma=float(params.get("gamma", 0.99)), lam=float(params.get("lam", 0.95))
    )
    samples, source = read_rollout_log(params["input"], gae_params)
    summary = summarize(samples, cfg)
    decision = verdict(summary, thresholds)
    table = histogram_table(samples, cfg)

    out_dir = _prepare_out_dir(params["out"])
    payload = _base_report("adv-stats", params.get("stamp", False))
    payload.update(
        {
            "input": str(params["input"]),
            "source": source,
            "n": summary.n,
            "mu": summary.mu,
            "sd": summary.sd,
            "skewness": summary.skewness,
            "entropy_nats": summary.entropy_nats,
            "kl_vs_matched_normal": max(0.0, summary.kl_vs_matched_normal),
            "silverman_p": summary.silverman_p,
            "estimator_config": summary.estimator_config,
            "verdict": decision.verdict,
            "checks": decision.reasons,
            "thresholds": {
                "center_ratio_max": thresholds.center_ratio_max,
                "entropy_min": thresholds.entropy_min,
                "kl_max": thresholds.kl_max,
            },
            "threshold_note": (
                "entropy and KL depend on the estimator echoed in estimator_config; "
                "recalibrate thresholds before comparing against other estimators"
            ),
        }
    )
    write_json(out_dir / "summary.json", payload)
    write_csv(
        out_dir / "histogram.csv",
        ["bin_left", "bin_right", "count", "p", "matched_normal_mass"],
        table,
    )
    return 0


# ---------------------------------------------------------------------------
# penalty


def run_penalty(params: dict) -> int:
    ckpt_ref, ckpt_cur, profile, pairs = _open_pair(
        params["ref"], params["current"], params["profile"]
    )
    kinds = set(params.get("kinds") or DEFAULT_SURGERY_KINDS)
    rank = int(params["rank"])
    if rank < 1:
        raise ValidationError(f"rank must be >= 1, got {rank}")
    rows = []
    per_kind: dict[str, float] = {}
    import warnings as _warnings

    for key, name_ref, name_cur in pairs:
        if key.kind not in kinds:
            continue
        w_ref = load_matrix(ckpt_ref, name_ref)
        w_cur = load_matrix(ckpt_cur, name_cur)
        rank_used = min(rank, min(w_ref.shape))
        with _warnings.catch_warnings():
            _warnings.simplefilter("ignore")  # degeneracy lands in the table
            ref = fit_reference(w_ref, rank_used)
        value = penalty_value(w_cur, ref)
        rows.append((key.layer, key.kind, name_ref, rank_used, value, ref.degenerate))
        per_kind[key.kind] = per_kind.get(key.kind, 0.0) + value
    if not rows:
        raise ValidationError("no matrices selected; check --kinds against the profile")

    out_dir = _prepare_out_dir(params["out"])
    write_csv(
        out_dir / "penalty.csv",
        ["layer", "kind", "tensor", "rank_used", "penalty", "degenerate_boundary"],
        rows,
    )
    payload = _base_report("penalty", params.get("stamp", False))
    payload.update(
        {
            "inputs": {
                "ref": str(ckpt_ref.path),
                "current": str(ckpt_cur.path),
                "profile": profile.name,
                "rank": rank,
            },
            "per_kind_totals": {k: per_kind[k] for k in sorted(per_kind)},
            "total": sum(per_kind.values()),
            "matrices": len(rows),
        }
    )
    write_json(out_dir / "summary.json", payload)
    return 0


# ---------------------------------------------------------------------------
# inspect


def run_inspect(params: dict) -> int:
    ckpt = open_checkpoint(params["path"])
    print(f"checkpoint: {ckpt.path}")
    print(f"tensors: {ckpt.tensor_count}")
    print(f"payload bytes: {ckpt.payload_bytes}")
    dtypes: dict[str, int] = {}
    for info in ckpt.index.values():
        dtypes[info.dtype] = dtypes.get(info.dtype, 0) + 1
    for dtype in sorted(dtypes):
        print(f"  {dtype}: {dtypes[dtype]}")
    if ckpt.metadata:
        print(f"metadata keys: {', '.join(sorted(ckpt.metadata))}")
    return 0


# ---------------------------------------------------------------------------
# manifest runner

_COMMANDS = {
    "svd-diff": run_svd_diff,
    "angles": run_angles,
    "restore": run_restore,
    "adv-stats": run_adv_stats,
    "penalty": run_penalty,
}

_MANIFEST_FILE_KEYS = ("a", "b", "donor", "host", "ref", "current", "input")


def run_manifest(params: dict) -> int:
    path = Path(params["manifest"])
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "command" not in manifest:
        raise ValidationError("manifest must be a JSON object with a 'command' field")
    command = manifest["command"]
    if command not in _COMMANDS:
        raise ValidationError(
            f"unknown manifest command {command!r}; expected one of {sorted(_COMMANDS)}"
        )

    merged: dict = {}
    merged.update(manifest.get("inputs", {}))
    for k, v in manifest.items():
        if k not in ("inputs", "command"):
            merged[k] = v
    if "output_dir" in merged:
        merged["out"] = merged.pop("output_dir")
    if "out" not in merged:
        raise ValidationError("manifest needs an 'output_dir'")
    for k in _MANIFEST_FILE_KEYS:
        if k in merged and not Path(merged[k]).is_file():
            raise ValidationError(f"manifest input {k!r} does not exist: {merged[k]}")
    if params.get("stamp"):
        merged["stamp"] = True
    return _COMMANDS[command](merged)


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svdsurgery",
        description="Spectral surgery and fine-tuning diagnostics for transformer checkpoints.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print the index of a checkpoint")
    p.add_argument("path")
    p.set_defaults(runner=run_inspect)

    for name, help_text in (
        ("svd-diff", "per-matrix singular-value drift between two checkpoints"),
        ("angles", "per-matrix principal angles between two checkpoints"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--a", required=True, help="first checkpoint")
        p.add_argument("--b", required=True, help="second checkpoint")
        p.add_argument("--profile", default="llama-style")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--emit-plot-data", action="store_true")
        p.add_argument("--stamp", action="store_true")
        p.set_defaults(runner=_COMMANDS[name])

    p = sub.add_parser("restore", help="splice singular values/vectors across checkpoints")
    p.add_argument("--mode", required=True, choices=["values", "vectors"])
    p.add_argument("--donor", required=True, help="checkpoint supplying the restored part")
    p.add_argument("--host", required=True, help="checkpoint keeping everything else")
    p.add_argument("--layers", default="all", help="all | first:K | last:K | list:I,J")
    p.add_argument("--ranks", default="all", help="all | top:K | bottom:K | range:A:B")
    p.add_argument("--kinds", default=",".join(DEFAULT_SURGERY_KINDS))
    p.add_argument("--profile", default="llama-style")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force-f32", action="store_true")
    p.add_argument("--align", default="none", choices=["none", "procrustes"])
    p.add_argument("--stamp", action="store_true")
    p.set_defaults(runner=run_restore)

    p = sub.add_parser("adv-stats", help="advantage-distribution statistics and verdict")
    p.add_argument("--input", required=True, help="JSON-lines rollout log")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bins", default="fd")
    p.add_argument("--bootstrap", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode-budget", type=int, default=1)
    p.add_argument("--kl-direction", default="empirical_vs_normal",
                   choices=["empirical_vs_normal", "normal_vs_empirical"])
    p.add_argument("--thresholds", default="default", help="'default' or a JSON file")
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--lam", type=float, default=0.95)
    p.add_argument("--stamp", action="store_true")
    p.set_defaults(runner=run_adv_stats)

    p = sub.add_parser("penalty", help="rotation-preservation penalty table")
    p.add_argument("--ref", required=True, help="reference checkpoint")
    p.add_argument("--current", required=True, help="checkpoint to score")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--kinds", default=",".join(DEFAULT_SURGERY_KINDS))
    p.add_argument("--profile", default="llama-style")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stamp", action="store_true")
    p.set_defaults(runner=run_penalty)

    p = sub.add_parser("run", help="execute a JSON manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stamp", action="store_true")
    p.set_defaults(runner=run_manifest)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    params = {k.replace("-", "_"): v for k, v in vars(args).items() if k not in ("runner",)}
    if "kinds" in params and isinstance(params["kinds"], str):
        params["kinds"] = tuple(k for k in params["kinds"].split(",") if k)
    try:
        return args.runner(params)
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
