"""Command-line front end.

    bagstorm gen-data    --config run.json
    bagstorm pretrain    --config run.json [--from GEN_DATA_RUN]
    bagstorm train-heads --config run.json [--from PRETRAIN_RUN]
    bagstorm attack      --config run.json [--from TRAIN_HEADS_RUN] [--seed 7]
    bagstorm sweep       --config run.json --axis K|epsilon
    bagstorm vuln-sweep  --config run.json
    bagstorm defend-eval --config run.json
    bagstorm report      RUN_DIR [RUN_DIR ...]

Each invocation writes a fresh directory ``<output_dir>/<subcommand>-NNN``
holding its artifacts and a ``manifest.json`` (config snapshot, seeds, code
version, and sha256 of every input and output).  Existing run directories
are never modified.  Stages that need a trained model build it from the
config when no ``--from`` run is given.

Exit codes: 0 success, 1 configuration/usage error, 2 numeric error,
3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__, data, evaluation, model, pipeline
from .config import RunConfig, from_dict, parse_config
from .errors import ConfigurationError, FormatError, IntegrityError, NumericError

logger = logging.getLogger("bagstorm")

SUBCOMMANDS = ("gen-data", "pretrain", "train-heads", "attack", "sweep", "vuln-sweep", "defend-eval", "report")
ENV_OUTPUT_DIR = "BAGSTORM_OUTPUT_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunDir:
    """Append-only output directory for one invocation."""

    def __init__(self, root: Path, subcommand: str):
        root.mkdir(parents=True, exist_ok=True)
        k = 1
        while True:
            path = root / f"{subcommand}-{k:03d}"
            try:
                path.mkdir()
                break
            except FileExistsError:
                k += 1
        self.path = path
        self.outputs: list[str] = []

    def write_text(self, name: str, text: str) -> Path:
        p = self.path / name
        with open(p, "x") as fh:
            fh.write(text)
        self.outputs.append(name)
        return p

    def claim(self, name: str) -> Path:
        """Reserve a file name for a writer that takes a path."""
        p = self.path / name
        if p.exists():
            raise FileExistsError(p)
        self.outputs.append(name)
        return p

    def finish(self, subcommand: str, cfg: RunConfig, inputs: dict[str, str], extra: dict | None = None) -> None:
        manifest = {
            "subcommand": subcommand,
            "code_version": __version__,
            "master_seed": cfg.master_seed,
            "config": cfg.to_dict(),
            "inputs": dict(sorted(inputs.items())),
            "outputs": {name: _sha256(self.path / name) for name in sorted(self.outputs)},
        }
        if extra:
            manifest.update(extra)
        with open(self.path / "manifest.json", "x") as fh:
            fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = parse_config(args.config)
    else:
        cfg = from_dict({})
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    return cfg


def _output_root(args, cfg: RunConfig) -> Path:
    root = args.output_dir or cfg.output_dir or os.environ.get(ENV_OUTPUT_DIR) or "runs"
    return Path(root)


def _parent(args) -> tuple[Path | None, dict]:
    """Manifest of the run named by --from, if any."""
    if not args.from_run:
        return None, {}
    parent = Path(args.from_run)
    mpath = parent / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise OSError(f"{mpath}: no manifest in --from run") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: corrupt manifest ({exc})") from None
    for name, digest in manifest.get("outputs", {}).items():
        if _sha256(parent / name) != digest:
            raise IntegrityError(f"{parent / name}: hash does not match its manifest")
    return parent, {"parent_manifest": _sha256(mpath)}


def _split_doc(system: pipeline.System) -> str:
    doc = {"train_ids": sorted(system.train_ids), "test_ids": sorted(s.slide_id for s in system.test)}
    return json.dumps(doc) + "\n"


def _system(args, cfg: RunConfig, run: RunDir, inputs: dict, need_heads: bool = True) -> pipeline.System:
    """Trained system from --from artifacts, or rebuilt from the config."""
    parent, chain = _parent(args)
    inputs.update(chain)
    dataset = None
    if parent is not None and (parent / "dataset.json").exists():
        inputs["dataset.json"] = _sha256(parent / "dataset.json")
        dataset = data.load_manifest(parent / "dataset.json")
    if dataset is None:
        dataset = data.generate_dataset(cfg.gen_config())
    data.save_manifest(dataset, run.claim("dataset.json"))
    train, test = data.split(dataset, cfg.model.train_fraction, cfg.master_seed)

    weights = None
    if parent is not None:
        for name in ("model.json", "backbone.json"):
            if (parent / name).exists():
                weights = parent / name
                break
    if weights is not None:
        inputs[weights.name] = _sha256(weights)
        bundle = model.load_weights(weights)
        if not bundle.frozen:
            raise ConfigurationError(f"{weights}: stored backbone is not frozen")
        system = pipeline.System(dataset, train, test, bundle, [])
        if need_heads and weights.name != "model.json":
            system.bundle = pipeline.fit_heads(cfg, bundle, train)
            model.save_weights(system.bundle, run.claim("model.json"))
        return system

    res = pipeline.pretrain_backbone(cfg, train)
    system = pipeline.System(dataset, train, test, res.bundle, res.loss_log)
    if need_heads:
        system.bundle = pipeline.fit_heads(cfg, res.bundle, train)
    model.save_weights(system.bundle, run.claim("model.json" if need_heads else "backbone.json"))
    return system


def _write_reports(run: RunDir, cfg: RunConfig, rows: list[dict], stem: str = "report") -> None:
    for fmt in cfg.eval.formats:
        evaluation.write_report(rows, run.claim(f"{stem}.{fmt}"), fmt)


def _experiment_id(cfg: RunConfig, attack_cfg, tag: str = "") -> str:
    eps = evaluation.epsilon_numerator(attack_cfg.epsilon)
    eps_txt = str(int(eps)) if float(eps).is_integer() else repr(eps)
    return f"{tag}{attack_cfg.method}-{attack_cfg.strategy}-K{attack_cfg.K}-eps{eps_txt}"


# --- subcommands -----------------------------------------------------------------

def cmd_gen_data(args, cfg, run):
    dataset = data.generate_dataset(cfg.gen_config())
    data.save_manifest(dataset, run.claim("dataset.json"))
    labels = {t: sum(s.labels[t] == 1 for s in dataset) for t in ("A",)}
    logger.info("generated %d slides (%d tumor)", len(dataset), labels["A"])
    return {}


def cmd_pretrain(args, cfg, run):
    inputs: dict = {}
    system = _system(args, cfg, run, inputs, need_heads=False)
    run.write_text("split.json", _split_doc(system))
    run.write_text("pretrain_loss.json", json.dumps([repr(v) for v in system.pretrain_log]) + "\n")
    return inputs


def cmd_train_heads(args, cfg, run):
    inputs: dict = {}
    system = _system(args, cfg, run, inputs, need_heads=True)
    run.write_text("split.json", _split_doc(system))
    return inputs


def cmd_attack(args, cfg, run):
    inputs: dict = {}
    system = _system(args, cfg, run, inputs)
    attack_cfg = cfg.attack_config()
    res = evaluation.run_experiment(system.bundle, system.test.slides, attack_cfg, cfg.eval.tasks,
                                    cfg.eval.repeats, cfg.master_seed, args.workers, train_ids=system.train_ids)
    rows = evaluation.report_rows(_experiment_id(cfg, attack_cfg), res.summaries, attack_cfg,
                                  cfg.eval.repeats, cfg.master_seed, cfg.eval.model_tag)
    _write_reports(run, cfg, rows)
    lines = "".join(json.dumps(r) + "\n" for r in res.attack_records)
    run.write_text("attacks.jsonl", lines)
    for r in rows:
        logger.info("task %s: clean %.4f adv %.4f AD %.2f ASR %.4f", r["task_id"], r["clean_acc"],
                    r["adv_acc"], r["ad_points"], r["asr"])
    return inputs


def cmd_sweep(args, cfg, run):
    inputs: dict = {}
    system = _system(args, cfg, run, inputs)
    axis = args.axis or cfg.eval.sweep_axis
    values = cfg.eval.sweep_values
    if axis == "K" and values is not None:
        values = [int(v) for v in values]
    rows = evaluation.sweep(system.bundle, system.test.slides, cfg.attack_config(), axis, values,
                            cfg.eval.strategies, cfg.eval.tasks, cfg.eval.repeats, cfg.master_seed,
                            args.workers, train_ids=system.train_ids)
    report = []
    for row in rows:
        report += evaluation.report_rows(f"sweep-{axis}-" + _experiment_id(cfg, row.config), row.summaries,
                                         row.config, cfg.eval.repeats, cfg.master_seed, cfg.eval.model_tag)
    _write_reports(run, cfg, report)
    evaluation.write_plot_csv(evaluation.sweep_plot_rows(rows), run.claim(f"sweep_{axis}.csv"))
    return inputs


def cmd_vuln_sweep(args, cfg, run):
    inputs: dict = {}
    system = _system(args, cfg, run, inputs)
    res = evaluation.vuln_sweep(system.bundle, system.test.slides, cfg.attack_config(),
                                cfg.eval.patches_per_slide, cfg.master_seed, args.workers)
    rows = [asdict(r) for r in res.records]
    evaluation.write_plot_csv(rows, run.claim("vuln_records.csv"))
    summary = {
        "category_rates": res.category_rates,
        "normal_slide_rate": res.normal_slide_rate,
        "tumor_slide_rate": res.tumor_slide_rate,
        "n_records": len(res.records),
    }
    run.write_text("vuln_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    logger.info("vulnerability: %s", summary)
    return inputs


def cmd_defend_eval(args, cfg, run):
    inputs: dict = {}
    system = _system(args, cfg, run, inputs)
    attack_cfg = cfg.attack_config()
    summary, res = evaluation.defense_experiment(system.bundle, system.test.slides, attack_cfg, cfg.defence.amplitude,
                                                 cfg.eval.tasks, cfg.eval.repeats, cfg.master_seed, args.workers,
                                                 train_ids=system.train_ids)
    rows = evaluation.report_rows("defence-" + _experiment_id(cfg, attack_cfg), res.summaries, attack_cfg,
                                  cfg.eval.repeats, cfg.master_seed, cfg.eval.model_tag)
    _write_reports(run, cfg, rows)
    evaluation.write_plot_csv([asdict(s) for s in summary.values()], run.claim("defence.csv"))
    for s in summary.values():
        logger.info("task %s: no attack %.4f, attack %.4f, attack+defence %.4f, clean+defence %.4f",
                    s.task_id, s.no_attack, s.attack, s.attack_defence, s.clean_defence)
    return inputs


def cmd_report(args, cfg, run):
    rows = []
    inputs = {}
    for d in args.runs:
        path = Path(d) / "report.csv"
        if not path.exists():
            raise OSError(f"{path}: no report in run directory")
        inputs[str(path)] = _sha256(path)
        rows += evaluation.read_report(path)
    _write_reports(run, cfg, rows)
    return inputs


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-heads": cmd_train_heads,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "vuln-sweep": cmd_vuln_sweep,
    "defend-eval": cmd_defend_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bagstorm", description="Label-free patch attacks on toy slide models.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--output-dir", help=f"root for run directories (else config, ${ENV_OUTPUT_DIR}, ./runs)")
        p.add_argument("--workers", type=int, default=1, help="slide-level worker processes")
        p.add_argument("-v", "--verbose", action="store_true")
        if name not in ("gen-data", "report"):
            p.add_argument("--from", dest="from_run", help="run directory of the previous stage")
        if name == "sweep":
            p.add_argument("--axis", choices=("K", "epsilon"))
        if name == "report":
            p.add_argument("runs", nargs="+", help="run directories containing report.csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigurationError(f"--workers: {args.workers} must be >= 1")
        cfg = _load_config(args)
        run = RunDir(_output_root(args, cfg), args.subcommand)
        inputs = COMMANDS[args.subcommand](args, cfg, run)
        run.finish(args.subcommand, cfg, inputs)
        print(run.path)
        return 0
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
