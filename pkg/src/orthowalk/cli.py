"""Command-line interface.

Subcommands: train, eval, classify, diagnose, compress, validate-theory.
Every run takes `--out DIR`, writes its artifacts there along with a
`config.json` echoing the fully resolved settings, and prints a short
summary.  Settings resolve in the order: built-in default, preset (train
only), config file (`--config`, flat `key = value` lines), explicit flag.
Artifacts contain no timestamps, so a rerun with the same settings, seed,
and `--threads 1` is byte-identical.

On success the exit code is 0.  Any failure prints a single line
`error: <category>: <message>` to stderr and exits nonzero; configuration
problems are all enumerated in that line, not just the first.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .compress import compress_model, save_compressed_model, sweep_ranks, write_sweep_tsv
from .diagnostics import concentration_stats, diagnostics_table, dump_gram, write_diagnostics_tsv
from .evaluation import (
    classification_report_json,
    classify,
    format_ranking_text,
    learn_thresholds,
    link_prediction,
    ranking_report_json,
    write_json,
    write_per_relation_tsv,
)
from .kgdata import Dataset, corruption_labeled, load_dataset
from .model import load_model, save_model
from .sampling import substream
from .synthetic import (
    build_world,
    check_concentration,
    check_theorem,
    concentration_check_json,
    theorem_check_json,
    write_scatter_tsv,
)
from .trainer import LOSS_MODES, Hyperparams, train

PRESETS: dict[str, dict[str, Any]] = {
    "custom": {},
    "FB15K237": {"dim": 100, "learning-rate": 0.001},
    "WN18RR": {"dim": 100, "learning-rate": 0.01},
    "FB13": {"dim": 50, "learning-rate": 0.001},
}

_REQUIRED = object()


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int = 2):
        super().__init__(message)
        self.category = category
        self.code = code


class _Parser(argparse.ArgumentParser):
    """Argparse variant whose errors fit the single-line contract."""

    def error(self, message):  # noqa: D102 (argparse override)
        raise CliError("usage", message)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip() != ""]


@dataclass
class Option:
    name: str  # long flag without dashes, e.g. "learning-rate"
    kind: str  # int | float | str | bool | int-list | path-in
    default: Any = None
    help: str = ""
    choices: tuple | None = None

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")

    def convert(self, text: str) -> Any:
        if self.kind == "int":
            return int(text)
        if self.kind == "float":
            return float(text)
        if self.kind == "bool":
            return _parse_bool(text)
        if self.kind == "int-list":
            return _parse_int_list(text)
        return text


_COMMON = [
    Option("out", "str", _REQUIRED, "output directory, created if missing"),
    Option("config", "path-in", None, "flat key = value settings file"),
    Option("seed", "int", 0, "root seed for all randomness"),
    Option("threads", "int", None, "cap BLAS threads (default: library choice)"),
]

_DATA = [
    Option("train", "path-in", _REQUIRED, "training triples (TSV)"),
    Option("valid", "path-in", None, "validation triples (TSV)"),
    Option("test", "path-in", None, "test triples (TSV)"),
    Option("labeled-valid", "path-in", None, "labeled validation triples (TSV + label)"),
    Option("labeled-test", "path-in", None, "labeled test triples (TSV + label)"),
]

_HYPER = [
    Option("preset", "str", "custom", "hyperparameter preset", tuple(PRESETS)),
    Option("dim", "int", 100, "embedding dimensionality"),
    Option("margin", "float", 1.0, "score margin of the hinge"),
    Option("learning-rate", "float", 0.01, "SGD step size"),
    Option("lambda1", "float", 10.0, "orthogonality weight, head map"),
    Option("lambda2", "float", 10.0, "orthogonality weight, tail map"),
    Option("negatives", "int", 100, "corruptions per positive"),
    Option("loss-mode", "str", "multi-negative-max", "hinge form", LOSS_MODES),
    Option("max-epochs", "int", 1000, "epoch cap"),
    Option("batches-per-epoch", "int", 100, "minibatches per epoch"),
    Option("eval-every", "int", 20, "epochs between validation rounds"),
    Option("patience", "int", 5, "validation rounds without improvement before stopping"),
]

_MODEL = [Option("model", "path-in", _REQUIRED, "model file")]

COMMANDS: dict[str, list[Option]] = {
    "train": _COMMON + _DATA + _HYPER,
    "eval": _COMMON + _MODEL + _DATA + [
        Option("split", "str", "test", "split to rank", ("train", "valid", "test")),
    ],
    "classify": _COMMON + _MODEL + _DATA,
    "diagnose": _COMMON + _MODEL + _DATA + [
        Option("n-states", "int", 1000, "sampled states per relation"),
        Option("subset-size", "int", 10000, "entity subset for partition sums"),
        Option("dump-gram", "bool", False, "also write per-relation Gram matrices"),
    ],
    "compress": _COMMON + _MODEL + _DATA + [
        Option("ranks", "int-list", _REQUIRED, "comma-separated truncation ranks"),
        Option("method", "str", "svd", "factorization mode", ("svd", "symmetric")),
        Option("split", "str", "test", "split to rank", ("train", "valid", "test")),
        Option("save-rank", "int", None, "rank of the saved compressed model (default: last of --ranks)"),
    ],
    "validate-theory": _COMMON + [
        Option("entities", "int", 2000, "world vocabulary size"),
        Option("relations", "int", 1, "world relation count"),
        Option("dim", "int", 10, "world dimensionality"),
        Option("kappa", "float", 2.0, "entity length bound"),
        Option("step-bound", "float", 0.05, "walk step bound"),
        Option("triples", "int", 200, "triples for the prediction check"),
        Option("mc-samples", "int", 10000, "Monte Carlo draws per triple"),
        Option("z-states", "int", 1000, "states for the reference partition sum"),
        Option("conc-states", "int", 500, "states for the concentration check"),
    ],
}


def build_parser() -> _Parser:
    parser = _Parser(prog="orthowalk")
    parser.add_argument("--version", action="version", version=f"orthowalk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in COMMANDS.items():
        p = sub.add_parser(command)
        for opt in options:
            kwargs: dict[str, Any] = {"help": opt.help, "default": None, "dest": opt.dest}
            if opt.kind == "bool":
                kwargs["action"] = "store_const"
                kwargs["const"] = True
            else:
                kwargs["type"] = str
            p.add_argument(f"--{opt.name}", **kwargs)
    return parser


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    problems: list[str] = []
    for number, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {number}: expected key = value")
            continue
        key, _, value = line.partition("=")
        values[key.strip().replace("_", "-")] = value.strip()
    if problems:
        raise CliError("config", "; ".join(problems))
    return values


def resolve_settings(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Layer defaults, preset, config file, and flags; report every problem."""
    options = {opt.name: opt for opt in COMMANDS[command]}
    problems: list[str] = []

    raw: dict[str, str | None] = {
        opt.name: getattr(args, opt.dest) for opt in options.values()
    }
    config_values: dict[str, str] = {}
    config_path = raw.get("config")
    if config_path is not None:
        if not Path(config_path).is_file():
            raise CliError("config", f"config file not found: {config_path}")
        config_values = _read_config_file(config_path)
        for key in sorted(set(config_values) - set(options)):
            problems.append(f"unknown setting {key!r}")

    def layered(name: str) -> str | None:
        if raw.get(name) is not None:
            return raw[name]
        if name in config_values:
            return config_values[name]
        return None

    preset: dict[str, Any] = {}
    if "preset" in options:
        preset_name = layered("preset") or options["preset"].default
        if preset_name not in PRESETS:
            problems.append(
                f"unknown preset {preset_name!r} (choose from {', '.join(PRESETS)})"
            )
            preset_name = "custom"
        preset = dict(PRESETS[preset_name])
        preset["preset"] = preset_name

    resolved: dict[str, Any] = {}
    for name, opt in options.items():
        text = layered(name)
        if text is None:
            if name in preset:
                resolved[name] = preset[name]
            elif opt.default is _REQUIRED:
                problems.append(f"missing required setting --{name}")
            else:
                resolved[name] = opt.default
            continue
        if isinstance(text, str):
            try:
                value = opt.convert(text)
            except ValueError:
                problems.append(f"invalid value for --{name}: {text!r}")
                continue
        else:
            value = text
        if opt.choices is not None and value not in opt.choices:
            problems.append(
                f"invalid value for --{name}: {value!r} (choose from {', '.join(map(str, opt.choices))})"
            )
            continue
        resolved[name] = value

    for name, opt in options.items():
        if opt.kind == "path-in" and resolved.get(name) is not None:
            if not Path(resolved[name]).is_file():
                problems.append(f"--{name}: file not found: {resolved[name]}")

    if problems:
        raise CliError("config", "; ".join(problems))
    return resolved


def _prepare_out(settings: dict[str, Any], command: str) -> Path:
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo = {k: v for k, v in settings.items() if k != "config"}
    write_json(
        {"command": command, "package_version": __version__, "settings": echo},
        out / "config.json",
    )
    return out


def _load_dataset(settings: dict[str, Any]) -> Dataset:
    try:
        return load_dataset(
            settings["train"],
            settings.get("valid"),
            settings.get("test"),
            settings.get("labeled-valid"),
            settings.get("labeled-test"),
        )
    except Exception as exc:
        raise CliError("data", str(exc), code=1) from exc


def _load_model_checked(settings: dict[str, Any], dataset: Dataset):
    try:
        model = load_model(settings["model"])
    except Exception as exc:
        raise CliError("model", str(exc), code=1) from exc
    if (
        model.vocab.entities != dataset.vocab.entities
        or model.vocab.relations != dataset.vocab.relations
    ):
        raise CliError(
            "model",
            "model vocabulary does not match the dataset files",
            code=1,
        )
    return model


def _hyper_from_settings(settings: dict[str, Any]) -> Hyperparams:
    try:
        return Hyperparams(
            dim=settings["dim"],
            margin=settings["margin"],
            learning_rate=settings["learning-rate"],
            lambda1=settings["lambda1"],
            lambda2=settings["lambda2"],
            n_negatives=settings["negatives"],
            loss_mode=settings["loss-mode"],
            max_epochs=settings["max-epochs"],
            batches_per_epoch=settings["batches-per-epoch"],
            eval_every=settings["eval-every"],
            patience=settings["patience"],
            seed=settings["seed"],
        )
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc


def cmd_train(settings: dict[str, Any]) -> None:
    dataset = _load_dataset(settings)
    hyper = _hyper_from_settings(settings)
    out = _prepare_out(settings, "train")
    with open(out / "training_log.tsv", "w", encoding="utf-8") as log:
        log.write("epoch\tmean_loss\tmean_penalty\tvalidation_mrr\n")
        state = train(dataset, hyper, log_stream=log)
    metadata = {
        "command": "train",
        "seed": settings["seed"],
        "hyperparams": {k: getattr(hyper, k) for k in (
            "dim", "margin", "learning_rate", "lambda1", "lambda2", "n_negatives",
            "loss_mode", "max_epochs", "batches_per_epoch", "eval_every", "patience",
        )},
        "best_epoch": state.best_epoch,
        "best_validation_mrr": None if state.best_metric != state.best_metric else state.best_metric,
        "epochs_run": len(state.history),
    }
    save_model(state.best_model, out / "model.bin", metadata=metadata)
    last = state.history[-1]
    write_json(
        {
            "best_epoch": state.best_epoch,
            "best_validation_mrr": metadata["best_validation_mrr"],
            "epochs_run": len(state.history),
            "final_mean_loss": last.mean_loss,
            "final_mean_penalty": last.mean_penalty,
            "final_ortho_residual_mean": last.ortho_residual_mean,
        },
        out / "metrics.json",
    )
    print(f"trained {len(state.history)} epochs; best epoch {state.best_epoch}")
    if metadata["best_validation_mrr"] is not None:
        print(f"best validation MRR {state.best_metric:.4f}")
    print(f"model written to {out / 'model.bin'}")


def cmd_eval(settings: dict[str, Any]) -> None:
    dataset = _load_dataset(settings)
    model = _load_model_checked(settings, dataset)
    out = _prepare_out(settings, "eval")
    try:
        report = link_prediction(model, dataset, split=settings["split"])
    except ValueError as exc:
        raise CliError("data", str(exc), code=1) from exc
    write_json(ranking_report_json(report, dataset.vocab), out / "ranking.json")
    (out / "ranking.txt").write_text(format_ranking_text(report), encoding="utf-8")
    with open(out / "per_relation.tsv", "w", encoding="utf-8") as f:
        write_per_relation_tsv(report, f, dataset.vocab)
    sys.stdout.write(format_ranking_text(report))


def cmd_classify(settings: dict[str, Any]) -> None:
    dataset = _load_dataset(settings)
    model = _load_model_checked(settings, dataset)
    out = _prepare_out(settings, "classify")
    labeled_valid = dataset.labeled_valid
    labeled_test = dataset.labeled_test
    rng = substream(settings["seed"], "classify")
    if labeled_valid is None:
        if not dataset.valid:
            raise CliError("data", "no labeled or plain validation split", code=1)
        labeled_valid = corruption_labeled(dataset.valid, rng, model.n_entities)
    if labeled_test is None:
        if not dataset.test:
            raise CliError("data", "no labeled or plain test split", code=1)
        labeled_test = corruption_labeled(dataset.test, rng, model.n_entities)
    thresholds = learn_thresholds(model, labeled_valid)
    report = classify(model, thresholds, labeled_test)
    write_json(classification_report_json(report, dataset.vocab), out / "classification.json")
    print(f"accuracy {report.accuracy:.4f} on {report.n_examples} labeled triples")


def cmd_diagnose(settings: dict[str, Any]) -> None:
    dataset = _load_dataset(settings)
    model = _load_model_checked(settings, dataset)
    out = _prepare_out(settings, "diagnose")
    try:
        report = link_prediction(model, dataset, split="test")
    except ValueError as exc:
        raise CliError("data", str(exc), code=1) from exc
    hits10 = {r: m.hits[10] for r, m in report.per_relation.items()}
    rng = substream(settings["seed"], "diagnostics")
    rows = {
        r: concentration_stats(
            model, r, settings["n-states"], settings["subset-size"], rng
        )
        for r in range(model.n_relations)
    }
    table = diagnostics_table(model, hits10, rows)
    with open(out / "diagnostics.tsv", "w", encoding="utf-8") as f:
        write_diagnostics_tsv(table, f, dataset.vocab)
    if settings["dump-gram"]:
        for r in range(model.n_relations):
            for which in ("head", "tail"):
                with open(out / f"gram_rel{r}_{which}.tsv", "w", encoding="utf-8") as f:
                    dump_gram(model.relations[r], which, f)
    c = table.correlations
    print(
        "correlation vs hits@10: "
        f"ortho_residual {c['ortho_residual']:+.3f}, "
        f"sigma_combined {c['sigma_combined']:+.3f}"
    )


def cmd_compress(settings: dict[str, Any]) -> None:
    dataset = _load_dataset(settings)
    model = _load_model_checked(settings, dataset)
    out = _prepare_out(settings, "compress")
    ranks = settings["ranks"]
    if not ranks:
        raise CliError("config", "--ranks is empty")
    bad = [k for k in ranks if not (1 <= k <= model.dim)]
    if bad:
        raise CliError("config", f"ranks out of [1, {model.dim}]: {bad}")
    try:
        rows = sweep_ranks(
            model, dataset, ranks, split=settings["split"], method=settings["method"]
        )
    except ValueError as exc:
        raise CliError("data", str(exc), code=1) from exc
    with open(out / "sweep.tsv", "w", encoding="utf-8") as f:
        write_sweep_tsv(rows, f)
    save_rank = settings.get("save-rank") or ranks[-1]
    if not (1 <= save_rank <= model.dim):
        raise CliError("config", f"--save-rank out of [1, {model.dim}]: {save_rank}")
    _, factored = compress_model(model, save_rank, settings["method"])
    save_compressed_model(
        model,
        factored,
        out / "compressed.bin",
        metadata={"command": "compress", "method": settings["method"], "seed": settings["seed"]},
    )
    for row in rows:
        print(
            f"rank {row.rank:>4}  ratio {row.ratio:.3f}  MRR {row.mrr:.4f}  "
            f"hits@10 {row.hits[10]:.4f}  error {row.mean_frobenius_error:.4g}"
        )


def cmd_validate_theory(settings: dict[str, Any]) -> None:
    out = _prepare_out(settings, "validate-theory")
    seed = settings["seed"]
    world = build_world(
        settings["entities"],
        settings["relations"],
        settings["dim"],
        settings["kappa"],
        settings["step-bound"],
        substream(seed, "genwalk-world"),
    )
    theorem = check_theorem(
        world,
        settings["triples"],
        settings["mc-samples"],
        substream(seed, "genwalk-theorem"),
        n_z_states=settings["z-states"],
    )
    write_json(theorem_check_json(theorem), out / "theorem.json")
    with open(out / "theorem_scatter.tsv", "w", encoding="utf-8") as f:
        write_scatter_tsv(theorem, f)
    checks = [
        check_concentration(
            world, r, settings["conc-states"], substream(seed, f"genwalk-concentration-{r}")
        )
        for r in range(settings["relations"])
    ]
    write_json({"relations": [concentration_check_json(c) for c in checks]}, out / "concentration.json")
    print(
        f"prediction check: r {theorem.pearson_r:.4f}, slope {theorem.slope:.4f}, "
        f"max deviation {theorem.max_abs_deviation:.4f}"
    )
    for check in checks:
        print(
            f"concentration rel {check.relation}: "
            f"cv head {check.head.cv:.4f}, cv tail {check.tail.cv:.4f}"
        )


_HANDLERS: dict[str, Callable[[dict[str, Any]], None]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "classify": cmd_classify,
    "diagnose": cmd_diagnose,
    "compress": cmd_compress,
    "validate-theory": cmd_validate_theory,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        settings = resolve_settings(args.command, args)
        limiter = None
        if settings.get("threads") is not None:
            if settings["threads"] < 1:
                raise CliError("config", f"--threads must be positive, got {settings['threads']}")
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=settings["threads"])
        try:
            _HANDLERS[args.command](settings)
        finally:
            if limiter is not None:
                limiter.unregister()
        return 0
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.code
    except BrokenPipeError:
        return 1
    except Exception as exc:  # keep the contract: one line, nonzero exit
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
