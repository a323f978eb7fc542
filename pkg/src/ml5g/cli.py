"""Command line entry point: ``ml5g generate|run|evaluate``.

Exit codes: 0 success, 1 validation failure (intent or model), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ml5g.association import evaluate_fig5
from ml5g.mlfo import IntentError, default_hosts, default_intent_text, parse_intent
from ml5g.nn import MlpModel, TrainingError
from ml5g.underlay import DensityClass, generate_deployment, rows_to_csv

log = logging.getLogger("ml5g")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunManifest:
    intent_path: Path | None
    out_dir: Path
    seeds: tuple[int, ...]
    densities: tuple[str, ...]
    verbosity: int = 0

    def __post_init__(self):
        if not self.seeds:
            raise CliError("at least one seed required", EXIT_VALIDATION)

    def prepare_out(self) -> Path:
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CliError(f"cannot create output directory {self.out_dir}: {exc}") from None
        if not os.access(self.out_dir, os.W_OK):
            raise CliError(f"output directory {self.out_dir} is not writable")
        return self.out_dir

    def intent_text(self) -> str:
        if self.intent_path is None:
            return default_intent_text()
        try:
            return self.intent_path.read_text()
        except OSError as exc:
            raise CliError(f"cannot read intent: {exc}") from None


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"1,2,5"`` or ranges like ``"0-29"``, mixed freely."""
    seeds: list[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds += range(int(lo), int(hi) + 1)
        else:
            seeds.append(int(part))
    return tuple(seeds)


def parse_densities(text: str) -> tuple[str, ...]:
    return tuple(DensityClass(p.strip()).value for p in text.split(",") if p.strip())


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from None


def _intent(manifest: RunManifest):
    try:
        return parse_intent(manifest.intent_text())
    except IntentError as exc:
        for err in exc.errors:
            print(f"intent error: {err}", file=sys.stderr)
        raise CliError("invalid intent", EXIT_VALIDATION) from None


def cmd_generate(manifest: RunManifest, side_m: float = 100.0) -> list[Path]:
    out = manifest.prepare_out()
    paths = []
    for density in manifest.densities:
        for seed in manifest.seeds:
            dep = generate_deployment(density, side_m, seed)
            path = out / f"deployment_{density}_{seed}.json"
            _write(path, dep.to_json() + "\n")
            paths.append(path)
    return paths


def cmd_run(manifest: RunManifest, dry_run: bool = False, edges: int = 1) -> dict:
    from ml5g.mlfo import EventLog, instantiate
    from ml5g.usecase import deploy, production_network, run_training_phase

    intent = _intent(manifest)
    hosts = default_hosts(max(edges, intent.host_counts.get("edge", 1)))
    if dry_run:
        inst = instantiate(intent, hosts)
        print(json.dumps(inst.pipeline.graph(), indent=2))
        return inst.dump()
    out = manifest.prepare_out()
    events_path = out / "events.jsonl"
    if events_path.exists():
        events_path.unlink()
    network = production_network(manifest.seeds[0], manifest.densities[0])
    inst = deploy(intent, hosts, network, event_log=EventLog(events_path))
    try:
        run_training_phase(inst)
    except TrainingError as exc:
        _write(out / "state.json", json.dumps(inst.dump(), indent=2, sort_keys=True) + "\n")
        code = EXIT_VALIDATION if "validation failed" in str(exc) else EXIT_RUNTIME
        raise CliError(f"instance failed: {inst.failure_cause}", code) from None
    _write(out / "model.json", inst.active_artifact.decode() + "\n")
    dump = inst.dump()
    _write(out / "state.json", json.dumps(dump, indent=2, sort_keys=True) + "\n")
    return dump


def cmd_evaluate(manifest: RunManifest, model_path: Path) -> tuple[Path, Path]:
    try:
        model = MlpModel.from_bytes(model_path.read_bytes())
    except OSError as exc:
        raise CliError(f"cannot read model: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise CliError(f"malformed model file: {exc}", EXIT_VALIDATION) from None
    intent = _intent(manifest)
    out = manifest.prepare_out()
    result = evaluate_fig5(manifest.densities, manifest.seeds, model, intent.policies)
    csv_path, summary_path = out / "results.csv", out / "summary.json"
    _write(csv_path, rows_to_csv(result.rows))
    _write(summary_path, json.dumps([s.to_dict() for s in result.summary], indent=2) + "\n")
    return csv_path, summary_path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--intent", type=Path, help="ML intent JSON (default: bundled ap_association intent)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seeds", default="0", help="comma list, ranges allowed (0-29)")
    common.add_argument("--densities", default="sparse,medium,dense")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="ml5g", description="ML-orchestrated WLAN association experiments")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="write deployment JSON files")
    g.add_argument("--side", type=float, default=100.0, help="square side in metres")
    r = sub.add_parser("run", parents=[common], help="train, validate and deploy a model")
    r.add_argument("--dry-run", action="store_true", help="print the wiring graph only")
    r.add_argument("--edges", type=int, default=1, help="number of edge hosts")
    e = sub.add_parser("evaluate", parents=[common], help="NN vs SSF throughput grid")
    e.add_argument("--model", type=Path, required=True)
    return p


def _setup_logging(verbosity: int) -> None:
    level = os.environ.get("ML5G_LOG")
    if level is None:
        level = "DEBUG" if verbosity > 1 else "INFO" if verbosity == 1 else "WARNING"
    logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        manifest = RunManifest(
            args.intent, args.out, parse_seeds(args.seeds), parse_densities(args.densities), args.verbose
        )
        if args.command == "generate":
            paths = cmd_generate(manifest, args.side)
            print(f"wrote {len(paths)} deployments to {manifest.out_dir}")
        elif args.command == "run":
            dump = cmd_run(manifest, dry_run=args.dry_run, edges=args.edges)
            print(f"state: {dump['state']}")
            if dump["active_model_hash"]:
                print(f"model: {dump['active_model_hash']}")
        else:
            csv_path, summary_path = cmd_evaluate(manifest, args.model)
            print(f"wrote {csv_path} and {summary_path}")
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
