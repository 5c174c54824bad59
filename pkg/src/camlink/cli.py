"""Command-line entry point: ``synth``, ``extract``, ``match`` and ``eval``.

Each command reads only files written by earlier commands and leaves a
``run_record.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import logging
import platform
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from . import __version__
from .artifacts import read_json, write_csv_artifact, write_json_artifact, write_jsonl_artifact
from .clustering import GroupingOutcome
from .config import PROTOCOLS, SCHEMES, RunConfig
from .errors import CamlinkError, ConfigError, DegenerateRoc, EmptyEvaluation, ManifestError, NotEnoughImages
from .fingerprint import load_fingerprint, save_fingerprint
from .identity import (
    IMAGE_SUFFIXES,
    Account,
    PairLabel,
    ScoreMatrix,
    decide_pairs,
    extract_accounts,
    score_matrix,
)
from .metrics import (
    ClusteringScores,
    EvaluationMode,
    all_in_one_baseline,
    average_precisions,
    evaluate_clustering,
    operating_point,
    repost_removal_counts,
    roc_points,
)
from .schema_validator import validate_artifact
from .synth import build_protocol, load_manifest, materialize

logger = logging.getLogger(__name__)

UTC = timezone.utc

LIBRARIES = ("numpy", "scipy", "scikit-learn", "pandas", "PyWavelets", "Pillow", "rich", "jsonschema")


def configure_logging(verbose: bool, console: Console) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )


def _progress(console: Console) -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        TimeElapsedColumn(),
        console=console,
    )


def _versions() -> dict[str, Optional[str]]:
    versions: dict[str, Optional[str]] = {"camlink": __version__, "python": platform.python_version()}
    for name in LIBRARIES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_run_record(
    out_dir: Path,
    command: str,
    argv: Sequence[str],
    config: RunConfig,
    *,
    inputs: Sequence[Path] = (),
    outputs: Sequence[Path] = (),
) -> Path:
    record = {
        "command": command,
        "argv": list(argv),
        "config": config.to_dict(),
        "seed": config.seed,
        "versions": _versions(),
        "created_at": datetime.now(UTC).isoformat().replace("+00:00", "Z"),
        "inputs": [str(path) for path in inputs],
        "outputs": [str(path) for path in outputs],
    }
    validate_artifact(record, "run_record", "run record")
    return write_json_artifact(out_dir / "run_record.json", record)


def _common_overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {"seed": args.seed, "workers": args.workers, "out": args.out}


def _load_config(args: argparse.Namespace, overrides: dict[str, Any]) -> RunConfig:
    config_path = Path(args.config) if args.config else None
    return RunConfig.from_sources(config_path, {**_common_overrides(args), **overrides})


def _output_dir(args: argparse.Namespace, config: RunConfig, leaf: str) -> Path:
    """``--out`` as given, else a per-command folder under the configured output root."""
    return Path(args.out) if args.out else config.out_dir / leaf


# synth


def cmd_synth(args: argparse.Namespace, console: Console) -> int:
    config = _load_config(
        args,
        {
            "protocol": args.protocol,
            "cameras": args.cameras,
            "images_per_camera": args.images_per_camera,
            "individuals": args.individuals,
            "album": args.album,
            "reposts": args.reposts,
            "dims": args.dims,
            "sigma_k": args.sigma_k,
            "sigma_eta": args.sigma_eta,
        },
    )
    out_dir = _output_dir(args, config, "dataset")
    manifest = build_protocol(config.synth, config.seed)
    with _progress(console) as progress:
        task = progress.add_task(f"Rendering {manifest.protocol}", total=manifest.image_count)
        manifest_path = materialize(
            manifest,
            out_dir,
            workers=config.workers,
            on_image_done=lambda _: progress.advance(task),
        )
    counts = read_json(manifest_path)["summary"]
    table = Table(title=f"Synthetic dataset ({manifest.protocol})")
    table.add_column("Users", justify="right")
    table.add_column("Images", justify="right")
    table.add_column("Reposts", justify="right")
    table.add_column("Positive pairs", justify="right")
    table.add_column("Negative pairs", justify="right")
    table.add_column("Excluded pairs", justify="right")
    table.add_row(
        *(str(counts[key]) for key in ("users", "images", "reposts", "positive_pairs", "negative_pairs", "excluded_pairs"))
    )
    console.print(table)
    write_run_record(out_dir, "synth", args.argv, config, outputs=[manifest_path])
    return 0


# extract


def _has_images(path: Path) -> bool:
    return any(p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES for p in path.iterdir())


def discover_accounts(path: Path) -> tuple[list[Account], bool]:
    """Accounts under ``path`` and whether ``path`` is a single account directory."""
    if not path.exists():
        raise ConfigError(f"Input path not found: {path}")
    if (path / "manifest.json").exists():
        return load_manifest(path).to_accounts(base_dir=path), False
    if not path.is_dir():
        raise ConfigError(f"Expected a dataset or account directory, got {path}")
    if _has_images(path):
        return [Account.from_directory(path)], True
    account_dirs = sorted(p for p in path.iterdir() if p.is_dir() and _has_images(p))
    if account_dirs:
        return [Account.from_directory(p) for p in account_dirs], False
    raise NotEnoughImages(f"No images found under {path}", account_id=path.name, count=0)


def _scf_clusters(account: Account) -> dict[str, Any]:
    members = account.image_ids
    return {
        "account_id": account.account_id,
        "min_group_size": 2,
        "iterations": 0,
        "groups": [{"index": 0, "member_ids": members, "size": len(members), "kept": True}],
        "rejected_ids": [],
    }


def cmd_extract(args: argparse.Namespace, console: Console) -> int:
    config = _load_config(
        args,
        {
            "scheme": args.scheme,
            "alpha": args.alpha,
            "beta": args.beta,
            "lambda": args.lam,
            "gamma": args.gamma,
            "crop": args.crop,
        },
    )
    source = Path(args.path)
    accounts, single = discover_accounts(source)
    out_dir = _output_dir(args, config, config.scheme)
    with _progress(console) as progress:
        task = progress.add_task(f"Extracting ({config.scheme})", total=len(accounts))
        batch = extract_accounts(accounts, config.scheme, config, on_account_done=lambda _: progress.advance(task))
    if single and batch.errors:
        raise next(iter(batch.errors.values()))

    table = Table(title=f"Fingerprints ({config.scheme})")
    for column in ("Account", "Images", "Groups", "Kept", "Rejected", "Status"):
        table.add_column(column, justify="left" if column in ("Account", "Status") else "right")
    entries = []
    outputs: list[Path] = []
    for account in accounts:
        account_id = account.account_id
        fp_paths = []
        for number, fp in enumerate(batch.fingerprints[account_id]):
            fp_path = out_dir / "fingerprints" / account_id / f"fp-{number:02d}.ucif"
            save_fingerprint(fp, fp_path)
            fp_paths.append(fp_path.relative_to(out_dir).as_posix())
        result = batch.cluster_results[account_id]
        error = batch.errors.get(account_id)
        clusters_rel = trace_rel = None
        if error is None:
            clusters = _scf_clusters(account) if result is None else result.to_dict(account_id)
            clusters["scheme"] = config.scheme
            validate_artifact(clusters, "clusters", f"clusters of {account_id}")
            clusters_path = write_json_artifact(out_dir / "clusters" / f"{account_id}.json", clusters)
            clusters_rel = clusters_path.relative_to(out_dir).as_posix()
            if result is not None:
                trace_path = write_jsonl_artifact(out_dir / "traces" / f"{account_id}.jsonl", result.trace)
                trace_rel = trace_path.relative_to(out_dir).as_posix()
        entries.append(
            {
                "account_id": account_id,
                "fingerprints": fp_paths,
                "clusters": clusters_rel,
                "trace": trace_rel,
                "failure": None if error is None else f"{type(error).__name__}: {error}",
            }
        )
        if error is not None:
            groups = 0
        else:
            groups = 1 if result is None else len(result.groups)
        rejected = 0 if result is None else len(result.rejected_ids)
        status = "ok" if error is None else f"[red]{type(error).__name__}[/red]"
        table.add_row(account_id, str(len(account.images)), str(groups), str(len(fp_paths)), str(rejected), status)

    index = {"scheme": config.scheme, "accounts": entries}
    validate_artifact(index, "fingerprint_index", "fingerprint index")
    outputs.append(write_json_artifact(out_dir / "index.json", index))
    console.print(table)
    write_run_record(out_dir, "extract", args.argv, config, inputs=[source], outputs=outputs)
    return 0


# match


def load_fingerprint_store(store: Path) -> tuple[str, dict[str, list]]:
    index_path = store / "index.json" if store.is_dir() else store
    if not index_path.exists():
        raise ConfigError(f"Fingerprint index not found: {index_path}")
    index = read_json(index_path)
    validate_artifact(index, "fingerprint_index", str(index_path))
    root = index_path.parent
    fingerprints = {
        entry["account_id"]: [load_fingerprint(root / rel) for rel in entry["fingerprints"]]
        for entry in index["accounts"]
    }
    return index["scheme"], fingerprints


def cmd_match(args: argparse.Namespace, console: Console) -> int:
    config = _load_config(args, {"tau": args.tau})
    store = Path(args.store)
    scheme, fingerprints = load_fingerprint_store(store)
    out_dir = Path(args.out) if args.out else (store if store.is_dir() else store.parent)
    matrix = score_matrix(fingerprints, workers=config.workers)
    decisions = sorted(decide_pairs(matrix, config.tau))

    scores_payload = {"scheme": scheme, **matrix.to_dict()}
    validate_artifact(scores_payload, "scores", "score matrix")
    outputs = [
        write_csv_artifact(out_dir / "scores.csv", matrix.to_frame()),
        write_json_artifact(out_dir / "scores.json", scores_payload),
        write_json_artifact(
            out_dir / "decisions.json",
            {
                "scheme": scheme,
                "tau": config.tau,
                "pairs": [{"a": a, "b": b, "score": matrix.score(a, b)} for a, b in decisions],
            },
        ),
    ]
    no_evidence = sum(1 for fps in fingerprints.values() if not fps)
    table = Table(title=f"Account matching ({scheme})")
    table.add_column("Accounts", justify="right")
    table.add_column("Without fingerprint", justify="right")
    table.add_column("τ", justify="right")
    table.add_column("Matched pairs", justify="right")
    table.add_row(str(len(matrix.account_ids)), str(no_evidence), f"{config.tau:g}", str(len(decisions)))
    console.print(table)
    write_run_record(out_dir, "match", args.argv, config, inputs=[store], outputs=outputs)
    return 0


# eval


def load_scores(path: Path) -> tuple[str, ScoreMatrix]:
    """Score matrix from ``scores.json``/``scores.csv`` or a directory holding ``scores.json``."""
    if path.is_dir():
        path = path / "scores.json"
    if not path.exists():
        raise ConfigError(f"Score file not found: {path}")
    if path.suffix.lower() == ".csv":
        return path.parent.name or path.stem, ScoreMatrix.from_csv(path)
    payload = read_json(path)
    validate_artifact(payload, "scores", str(path))
    return payload.get("scheme") or path.parent.name, ScoreMatrix.from_dict(payload)


def _identification_entry(
    label: str,
    source: Path,
    matrix: ScoreMatrix,
    labels: dict[tuple[str, str], PairLabel],
    tau: float,
    roc_path: Path,
) -> tuple[dict[str, Any], Optional[Path]]:
    per_query = average_precisions(matrix, labels)
    evaluated = [value for value in per_query.values() if value is not None]
    if len(evaluated) < len(per_query):
        logger.warning("%s: %d quer(ies) without a positive candidate skipped", label, len(per_query) - len(evaluated))
    known = set(matrix.account_ids)
    scored_pairs = [(matrix.score(a, b), pair) for (a, b), pair in labels.items() if a in known and b in known]
    tpr, fpr = operating_point(scored_pairs, tau)
    entry: dict[str, Any] = {
        "label": label,
        "source": str(source),
        "map": sum(evaluated) / len(evaluated) if evaluated else None,
        "queries_evaluated": len(evaluated),
        "queries_skipped": len(per_query) - len(evaluated),
        "auc": None,
        "eer": None,
        "tpr_at_tau": tpr,
        "fpr_at_tau": fpr,
        "roc_csv": None,
        "decided_pairs": len(decide_pairs(matrix, tau)),
    }
    try:
        curve = roc_points(scored_pairs)
    except DegenerateRoc as exc:
        logger.warning("%s: %s", label, exc)
        return entry, None
    entry["auc"] = curve.auc
    entry["eer"] = curve.eer
    written = write_csv_artifact(roc_path, curve.to_frame(), index=False)
    entry["roc_csv"] = written.name
    return entry, written


def _clustering_section(clusters_dir: Path, truth: dict[str, dict[str, str]], flags: dict[str, dict[str, bool]]) -> dict[str, Any]:
    if (clusters_dir / "clusters").is_dir():
        clusters_dir = clusters_dir / "clusters"
    files = sorted(clusters_dir.glob("*.json"))
    if not files:
        raise ConfigError(f"No cluster files found in {clusters_dir}")
    outcomes: dict[str, GroupingOutcome] = {}
    for path in files:
        payload = read_json(path)
        validate_artifact(payload, "clusters", str(path))
        account_id = payload.get("account_id") or path.stem
        if account_id not in truth:
            raise ManifestError(f"Cluster file {path.name} names account '{account_id}' missing from the manifest")
        outcomes[account_id] = GroupingOutcome.from_dict(payload)

    def scores(mode: EvaluationMode, baseline: bool) -> ClusteringScores:
        return evaluate_clustering(
            (
                (
                    all_in_one_baseline(outcome.image_ids) if baseline else outcome.groups,
                    () if baseline else outcome.rejected_ids,
                    truth[account_id],
                )
                for account_id, outcome in outcomes.items()
            ),
            mode,
        )

    section: dict[str, Any] = {}
    for mode in EvaluationMode:
        for baseline in (False, True):
            key = f"baseline_{mode.value}" if baseline else mode.value
            try:
                section[key] = scores(mode, baseline).to_dict()
            except EmptyEvaluation as exc:
                logger.warning("Clustering (%s): %s", key, exc)

    removed = reposts = rejected_own = own = 0
    for account_id, outcome in outcomes.items():
        r_removed, r_reposts, r_rejected, r_own = repost_removal_counts(outcome, flags[account_id])
        removed += r_removed
        reposts += r_reposts
        rejected_own += r_rejected
        own += r_own
    repost = {
        "removed_repost_ratio": removed / reposts if reposts else None,
        "false_rejected_ratio": rejected_own / own if own else None,
        "reposts": reposts,
        "own_images": own,
    }
    return {"clustering": section, "repost_removal": repost}


def cmd_eval(args: argparse.Namespace, console: Console) -> int:
    config = _load_config(args, {"tau": args.tau})
    manifest = load_manifest(Path(args.manifest))
    score_paths = [Path(part) for part in args.scores.split(",") if part.strip()]
    if not score_paths:
        raise ConfigError("--scores needs at least one path")
    out_dir = Path(args.out) if args.out else (score_paths[0] if score_paths[0].is_dir() else score_paths[0].parent)

    labels = manifest.pair_labels()
    counts = {label.value: 0 for label in PairLabel}
    for pair in labels.values():
        counts[pair.value] += 1
    report: dict[str, Any] = {
        "protocol": manifest.protocol,
        "tau": config.tau,
        "pair_counts": counts,
        "identification": [],
    }
    outputs: list[Path] = []
    seen: dict[str, int] = {}
    for path in score_paths:
        label, matrix = load_scores(path)
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label}-{seen[label]}"
        roc_name = "roc.csv" if len(score_paths) == 1 else f"roc-{label}.csv"
        entry, roc_file = _identification_entry(label, path, matrix, labels, config.tau, out_dir / roc_name)
        report["identification"].append(entry)
        if roc_file is not None:
            outputs.append(roc_file)

    if args.clusters:
        accounts = {account.account_id: account for account in manifest.to_accounts()}
        truth = {account_id: account.truth_labels() for account_id, account in accounts.items()}
        flags = {account_id: account.repost_flags() for account_id, account in accounts.items()}
        report.update(_clustering_section(Path(args.clusters), truth, flags))

    validate_artifact(report, "metrics_report", "metrics report")
    outputs.insert(0, write_json_artifact(out_dir / "metrics.json", report))

    table = Table(title=f"Identification ({manifest.protocol}, τ={config.tau:g})")
    for column in ("Scores", "MAP", "AUC", "EER", "TPR@τ", "FPR@τ"):
        table.add_column(column, justify="left" if column == "Scores" else "right")
    for entry in report["identification"]:
        table.add_row(
            entry["label"],
            *(_fmt(entry[key]) for key in ("map", "auc", "eer", "tpr_at_tau", "fpr_at_tau")),
        )
    console.print(table)
    if "clustering" in report:
        ctable = Table(title="Clustering")
        for column in ("Mode", "Purity", "Precision", "Recall"):
            ctable.add_column(column, justify="left" if column == "Mode" else "right")
        for key, values in report["clustering"].items():
            ctable.add_row(key, _fmt(values["purity"]), _fmt(values["precision"]), _fmt(values["recall"]))
        console.print(ctable)
    inputs = [Path(args.manifest), *score_paths] + ([Path(args.clusters)] if args.clusters else [])
    write_run_record(out_dir, "eval", args.argv, config, inputs=inputs, outputs=outputs)
    return 0


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Flat TOML file with default values; flags override it.")
    common.add_argument("--seed", type=int, help="Master seed (default 42).")
    common.add_argument("--workers", type=int, help="Worker thread cap (default 4).")
    common.add_argument("--out", help="Output directory.")
    common.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level.")

    parser = argparse.ArgumentParser(
        prog="camera_link",
        description="Link social-media accounts by the camera fingerprints in their images.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic benchmark dataset.")
    synth.add_argument("--protocol", choices=PROTOCOLS)
    synth.add_argument("--cameras", type=int)
    synth.add_argument("--images-per-camera", type=int)
    synth.add_argument("--individuals", type=int, help="Online protocol: number of individuals.")
    synth.add_argument("--album", help="Online protocol: album size range MIN,MAX.")
    synth.add_argument("--reposts", type=int, help="Reposted images injected per account.")
    synth.add_argument("--dims", help="Image size WxH.")
    synth.add_argument("--sigma-k", type=float, help="PRNU strength.")
    synth.add_argument("--sigma-eta", type=float, help="Shot/read noise std.")
    synth.set_defaults(handler=cmd_synth)

    extract = sub.add_parser("extract", parents=[common], help="Estimate per-account camera fingerprints.")
    extract.add_argument("path", help="Dataset root (with manifest.json), directory of accounts, or one account directory.")
    extract.add_argument("--scheme", choices=SCHEMES)
    extract.add_argument("--alpha", type=float)
    extract.add_argument("--beta", type=float)
    extract.add_argument("--lambda", dest="lam", type=int)
    extract.add_argument("--gamma", type=int)
    extract.add_argument("--crop", help="Central crop WxH.")
    extract.set_defaults(handler=cmd_extract)

    match = sub.add_parser("match", parents=[common], help="Score account pairs from a fingerprint store.")
    match.add_argument("store", help="Directory written by extract (or its index.json).")
    match.add_argument("--tau", type=float, help="Decision threshold (default 0.05).")
    match.set_defaults(handler=cmd_match)

    evaluate = sub.add_parser("eval", parents=[common], help="Evaluate scores and clusters against a manifest.")
    evaluate.add_argument("--manifest", required=True)
    evaluate.add_argument("--scores", required=True, help="One or more score files, comma separated.")
    evaluate.add_argument("--clusters", help="Extract output directory (or its clusters/ subdirectory).")
    evaluate.add_argument("--tau", type=float)
    evaluate.set_defaults(handler=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None, console: Console | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    console = console or Console()
    configure_logging(args.verbose, console)
    handler: Callable[[argparse.Namespace, Console], int] = args.handler
    try:
        return handler(args, console)
    except CamlinkError as exc:
        console.print(f"[red]{type(exc).__name__}:[/red] {exc}")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
