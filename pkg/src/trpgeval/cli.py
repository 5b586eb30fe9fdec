"""Command-line driver for every pipeline stage.

Settings resolve as: command-line flag, then the ``--config`` file (YAML or
JSON mapping), then ``ANTEVAL_<NAME>`` environment variables, then defaults.

Exit codes: 0 success, 2 configuration or input error, 3 backend or model
output failure, 4 batch finished with some failed sessions.
"""

from __future__ import annotations

import argparse
import logging
import os
import random
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import yaml

from . import ieg, iep, store
from .chargen import GenerationError, generate_profile, sample_attributes
from .gateway import (
    Backend,
    BackendKind,
    BackendSpec,
    GatewayError,
    RecordingBackend,
    derive_seed,
    open_backend,
)
from .model import Scenario, SessionConfig
from .orchestrator import SessionError, run_batch

EXIT_OK, EXIT_CONFIG, EXIT_GATEWAY, EXIT_PARTIAL = 0, 2, 3, 4

SCENARIOS = {"info-exchange": Scenario.INFO_EXCHANGE, "intention": Scenario.INTENTION_EXPRESSION}


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class Setting:
    convert: Callable[[Any], Any]
    default: Any = None


SETTINGS: dict[str, Setting] = {
    "backend": Setting(str),
    "model": Setting(str),
    "cache": Setting(str),
    "record": Setting(str),
    "max_parallel": Setting(int, 4),
    "timeout": Setting(float, 60.0),
    "retries": Setting(int, 3),
    "jobs": Setting(int, 1),
    "seed": Setting(int, 0),
    "k": Setting(int, iep.DEFAULT_K),
    "players": Setting(int, 3),
    "turns": Setting(int, 30),
    "sessions": Setting(int, 1),
    "scenario": Setting(str, "info-exchange"),
    "window": Setting(int),
    "count": Setting(int, 1),
}


def load_config_file(path: Optional[str]) -> dict[str, Any]:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping of key/values")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve(args: argparse.Namespace, environ: Optional[dict[str, str]] = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    file_values = load_config_file(getattr(args, "config", None))
    out: dict[str, Any] = {}
    for name, setting in SETTINGS.items():
        for source in (getattr(args, name, None), file_values.get(name), environ.get(f"ANTEVAL_{name.upper()}")):
            if source is not None:
                try:
                    out[name] = setting.convert(source)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad value for {name}: {source!r}") from exc
                break
        else:
            out[name] = setting.default
    return out


def backend_spec(settings: dict[str, Any]) -> BackendSpec:
    raw = settings.get("backend")
    if not raw:
        raise ConfigError("no backend configured; pass --backend remote:URL or scripted:PATH")
    kind_text, sep, target = raw.partition(":")
    if kind_text in ("http", "https"):
        kind_text, target = "remote", raw
    elif not sep or not target:
        raise ConfigError(f"backend must look like remote:URL or scripted:PATH, got {raw!r}")
    common = dict(
        model_name=settings.get("model"),
        max_parallel=settings["max_parallel"],
        timeout=settings["timeout"],
        retry_limit=settings["retries"],
    )
    if kind_text == "remote":
        spec = BackendSpec(BackendKind.REMOTE, endpoint=target, **common)
    elif kind_text == "scripted":
        spec = BackendSpec(BackendKind.SCRIPTED, script_path=Path(target), **common)
        if not spec.script_path.exists():
            raise ConfigError(f"script file {target} does not exist")
    else:
        raise ConfigError(f"unknown backend kind {kind_text!r}")
    if settings.get("cache"):
        spec = BackendSpec(
            BackendKind.CACHED, endpoint=spec.endpoint, script_path=spec.script_path,
            cache_path=Path(settings["cache"]), **common,
        )
    problems = spec.violations()
    if problems:
        raise ConfigError("; ".join(problems))
    return spec


def build_backend(settings: dict[str, Any]) -> Backend:
    backend = open_backend(backend_spec(settings))
    if settings.get("record"):
        backend = RecordingBackend(backend, settings["record"])
    return backend


def _positive(settings: dict[str, Any], *names: str) -> None:
    for name in names:
        if settings[name] is not None and settings[name] < 1:
            raise ConfigError(f"{name} must be >= 1")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_chars(args: argparse.Namespace, settings: dict[str, Any]) -> int:
    _positive(settings, "count")
    backend = build_backend(settings)
    rng = random.Random(settings["seed"])
    profiles = [
        generate_profile(backend, sample_attributes(rng), seed=derive_seed(settings["seed"], "gen-chars", i), corrected=args.corrected)
        for i in range(settings["count"])
    ]
    path = store.write_profiles(profiles, args.out)
    print(f"wrote {len(profiles)} profiles to {path}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace, settings: dict[str, Any]) -> int:
    _positive(settings, "players", "turns", "sessions", "jobs", "k", "window")
    scenario = SCENARIOS.get(settings["scenario"])
    if scenario is None:
        raise ConfigError(f"unknown scenario {settings['scenario']!r}; choose from {', '.join(SCENARIOS)}")
    players = store.read_profiles(args.roster) if args.roster else None
    config = SessionConfig(
        scenario, player_count=settings["players"], turn_count=settings["turns"],
        seed=settings["seed"], backend_spec=settings["backend"] or "", k_key_points=settings["k"],
    )
    print(f"players={config.player_count} turns={config.turn_count}")
    backend = build_backend(settings)
    result = run_batch(
        config, settings["sessions"], backend, args.out,
        jobs=settings["jobs"], window=settings["window"], corrected=args.corrected, players=players,
    )
    for log, path in zip(result.logs, result.paths):
        passes = sum(t.kind.value == "Pass" for t in log.turns)
        malformed = sum(t.malformed for t in log.turns)
        print(f"{log.session_id}: {len(log.turns)} turns, {passes} passes, {malformed} malformed -> {path}")
    for index, error in sorted(result.errors.items()):
        print(f"session {index} failed: {error}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_PARTIAL


def _read_logs(paths: Sequence[str]) -> list:
    logs = store.read_sessions(paths)
    if not logs:
        raise ConfigError("no session files found")
    return logs


def cmd_eval_iep(args: argparse.Namespace, settings: dict[str, Any]) -> int:
    _positive(settings, "k", "jobs")
    logs = _read_logs(args.logs)
    for log in logs:
        iep.check_info_session(log)
    report = iep.evaluate_sessions(build_backend(settings), logs, settings["k"], settings["jobs"])
    if args.report:
        report.write(args.report)
    print(f"P = {float(report.P):.4f} variance = {float(report.variance):.4f} count = {len(report.records)}")
    return EXIT_OK


def cmd_export_ft(args: argparse.Namespace, settings: dict[str, Any]) -> int:
    count = ieg.export_finetune_dataset(_read_logs(args.logs), args.out)
    print(f"wrote {count} examples to {args.out}")
    return EXIT_OK


def cmd_predict_dm(args: argparse.Namespace, settings: dict[str, Any]) -> int:
    examples = ieg.load_examples(args.eval)
    if not examples:
        raise ConfigError(f"{args.eval} holds no examples")
    result = ieg.evaluate_virtual_dm(build_backend(settings), examples, settings["jobs"], args.macro)
    ieg.write_predictions(result.predictions, args.out)
    failed = sum(p.error is not None for p in result.predictions)
    print(f"f_c = {result.scores.f_c:.2f} f_o = {result.scores.f_o:.2f} examples = {len(examples)} failed = {failed}")
    return EXIT_OK


def cmd_eval_ieg(args: argparse.Namespace, settings: dict[str, Any]) -> int:
    files = [args.pred_real, args.pred_gen, args.gold]
    values = [args.fr_c, args.fg_c, args.fr_o, args.fg_o]
    if any(f is not None for f in files):
        if any(v is not None for v in values):
            raise ConfigError("give prediction files or F values, not both")
        if any(f is None for f in files):
            raise ConfigError("--pred-real, --pred-gen and --gold go together")
        gold = ieg.load_examples(args.gold)
        f_r = ieg.score_prediction_file(ieg.read_predictions(args.pred_real), gold, args.macro)
        f_g = ieg.score_prediction_file(ieg.read_predictions(args.pred_gen), gold, args.macro)
        report = ieg.GapReport.from_scores(f_r, f_g, len(gold))
        print(f"f_r: c = {f_r.f_c:.2f} o = {f_r.f_o:.2f}")
        print(f"f_g: c = {f_g.f_c:.2f} o = {f_g.f_o:.2f}")
        data = report.to_dict()
        gaps = {"c": report.g_c, "o": report.g_o}
    else:
        pairs = {"c": (args.fr_c, args.fg_c), "o": (args.fr_o, args.fg_o)}
        if any((a is None) != (b is None) for a, b in pairs.values()):
            raise ConfigError("each F value needs its counterpart (--fr-c with --fg-c, --fr-o with --fg-o)")
        if all(a is None for a, _ in pairs.values()):
            raise ConfigError("nothing to compare; give prediction files or F values")
        gaps = {key: ieg.gap(a, b) for key, (a, b) in pairs.items() if a is not None}
        data = {
            "f_r": {"c": args.fr_c, "o": args.fr_o},
            "f_g": {"c": args.fg_c, "o": args.fg_o},
            "g_c": gaps.get("c"),
            "g_o": gaps.get("o"),
            "example_count": None,
        }
    for key, value in gaps.items():
        print(f"G^{key} = {value:.2f}")
    if args.report:
        store.atomic_write(Path(args.report), store.dumps(data) + "\n")
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace, settings: dict[str, Any]) -> int:
    aliases = store.load_aliases(args.aliases)
    result = store.ingest_real_corpus(args.path, args.adapter, aliases, strict=not args.lenient)
    for log in result.logs:
        store.write_session(log, args.out)
    if args.report:
        store.atomic_write(Path(args.report), store.dumps(result.report.to_dict()) + "\n")
    r = result.report
    print(f"ingested {r.sessions} sessions, {r.labels} labels, {len(r.dropped)} dropped labels")
    return EXIT_OK


def cmd_split(args: argparse.Namespace, settings: dict[str, Any]) -> int:
    logs = _read_logs(args.logs)
    train, evals = ieg.split_real_logs(
        logs, settings["seed"], train_fraction=args.train_fraction,
        train_count=args.train_count, eval_count=args.eval_count,
    )
    for log in train:
        store.write_session(log, args.train_out)
    for log in evals:
        store.write_session(log, args.eval_out)
    print(f"train = {len(train)} eval = {len(evals)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _backend_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backend")
    g.add_argument("--backend", help="remote:URL or scripted:PATH")
    g.add_argument("--model", help="model name sent to the backend")
    g.add_argument("--cache", help="JSON-lines response cache file")
    g.add_argument("--record", help="append every call to this script file for later replay")
    g.add_argument("--max-parallel", dest="max_parallel", type=int, help="in-flight request bound (default 4)")
    g.add_argument("--timeout", type=float, help="per-request timeout in seconds (default 60)")
    g.add_argument("--retries", type=int, help="retry limit for transient failures (default 3)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trpgeval", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, fn: Callable, help_text: str, backend: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML or JSON file of settings")
        p.add_argument("--jobs", type=int, help="concurrent sessions or evaluations (default 1)")
        if backend:
            _backend_flags(p)
        p.set_defaults(func=fn)
        return p

    p = command("gen-chars", cmd_gen_chars, "generate character profiles")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="roster.jsonl")
    p.add_argument("--corrected", action="store_true", help="use the typo-corrected prompt wording")

    p = command("run", cmd_run, "run a batch of sessions")
    p.add_argument("--scenario", help="info-exchange or intention")
    p.add_argument("--players", type=int)
    p.add_argument("--turns", type=int)
    p.add_argument("--sessions", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="key points recorded in the session config")
    p.add_argument("--window", type=int, help="turns of history shown to each agent (default all)")
    p.add_argument("--roster", help="profiles file from gen-chars to use as the players")
    p.add_argument("--out", default="sessions")
    p.add_argument("--corrected", action="store_true")

    p = command("eval-iep", cmd_eval_iep, "score information exchange precision")
    p.add_argument("--logs", nargs="+", required=True, help="session files or directories")
    p.add_argument("--k", type=int)
    p.add_argument("--report")

    p = command("export-ft", cmd_export_ft, "export a fine-tuning dataset", backend=False)
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = command("predict-dm", cmd_predict_dm, "run a virtual DM over an evaluation set")
    p.add_argument("--eval", required=True, help="evaluation set in fine-tune format")
    p.add_argument("--out", required=True)
    p.add_argument("--macro", action="store_true")

    p = command("eval-ieg", cmd_eval_ieg, "compute the intention expressiveness gap", backend=False)
    p.add_argument("--pred-real", dest="pred_real")
    p.add_argument("--pred-gen", dest="pred_gen")
    p.add_argument("--gold")
    p.add_argument("--fr-c", dest="fr_c", type=float)
    p.add_argument("--fg-c", dest="fg_c", type=float)
    p.add_argument("--fr-o", dest="fr_o", type=float)
    p.add_argument("--fg-o", dest="fg_o", type=float)
    p.add_argument("--macro", action="store_true")
    p.add_argument("--report")

    p = command("ingest", cmd_ingest, "convert an external log corpus", backend=False)
    p.add_argument("--adapter", required=True, choices=sorted(store.ADAPTERS))
    p.add_argument("--path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--aliases", help="YAML or JSON mapping of skill label to skill name")
    p.add_argument("--lenient", action="store_true", help="drop unmappable labels and list them in the report")
    p.add_argument("--report")

    p = command("split", cmd_split, "split real logs into train and eval sets", backend=False)
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--train-out", dest="train_out", required=True)
    p.add_argument("--eval-out", dest="eval_out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--train-count", dest="train_count", type=int)
    p.add_argument("--eval-count", dest="eval_count", type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        return args.func(args, settings)
    except (GatewayError, GenerationError, SessionError, iep.SummarizationShapeError, iep.MatchParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATEWAY
    except (ConfigError, store.StoreError, ieg.IegError, iep.IepError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
