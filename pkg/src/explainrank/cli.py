"""``explainrank`` command line: ingest, train, predict, evaluate, tune, ablate, report.

Every command reads one JSON config. ``--seed``, ``--out``, ``--system`` and
``--set section.key=value`` override it. Outputs are byte-stable for
unchanged inputs; wall-clock data goes only to ``<command>.meta.json``.
Log level comes from ``EXPLAINRANK_LOG`` (default WARNING).
"""

from __future__ import annotations

import argparse
import copy
import csv
import gzip
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Optional

from .corpus import (
    CorpusError,
    Fact,
    GoldExplanation,
    QaInstance,
    Role,
    SplitSet,
    Tablestore,
    corpus_stats,
    load_splits,
    load_tablestore,
    table_rank_proportions,
)
from .evaluation import EvalReport, K_GRID, ablation_csv, ablation_run, evaluate, map_by_length_csv
from .features import GROUPS, ConceptResource, EmbeddingResource, FeatureConfig, FeatureSpace, TripleResource
from .learner import DEFAULT_C_GRID, DEFAULT_NEG_GRID, LinearModel, TrainConfig, tune
from .pipeline import LEARNED_SYSTEMS, SYSTEMS, TFIDF_SYSTEMS, Experiment, Resources
from .ranking import read_dump, write_dump
from .textproc import ProcessedText

logger = logging.getLogger("explainrank")

BUNDLE_MAGIC = b"XRBUNDLE"
BUNDLE_VERSION = 1
LOG_ENV = "EXPLAINRANK_LOG"

DEFAULTS: dict[str, Any] = {
    "seed": None,
    "paths": {
        "tablestore": None,
        "train": None,
        "dev": None,
        "test": None,
        "concepts": None,
        "triples": None,
        "embeddings": None,
        "out": "out",
    },
    "tablestore": {"id_column": "UID", "content_columns": {}},
    "features": {
        "groups": list(GROUPS),
        "concept_top_k": 50,
        "rank_ceiling": 1000,
        "embed_mode": "triple",
        "tfidf_depth": None,
    },
    "system": "svr",
    "svr": {"C": 0.005, "epsilon": 0.1, "n_neg": 900, "max_epochs": 200, "tol": 1e-3, "bias_scale": 1.0},
    "ltr": {"C": 0.8, "n_neg": 1000, "max_epochs": 200, "tol": 1e-3, "pair_cap": 50_000},
    "tune": {"C": list(DEFAULT_C_GRID), "n_neg": list(DEFAULT_NEG_GRID)},
    "ablation": {"base": ["lex"], "addons": ["cn", "oie", "mh", "tfr", "emb"], "learners": ["svr", "ltr"]},
    "k_grid": list(K_GRID),
}


class ConfigError(ValueError):
    pass


class MissingArtifact(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _set_dotted(cfg: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"--set {dotted}: {p!r} is not a config section")
        node = node[p]
    if isinstance(node.get(parts[-1]), dict):
        raise ConfigError(f"--set {dotted}: only scalar or list fields can be overridden")
    node[parts[-1]] = value


class RunConfig:
    """Validated view over the merged config dictionary."""

    def __init__(self, data: dict, base_dir: Path):
        self.data = data
        self.base_dir = base_dir
        self.validate()

    @classmethod
    def load(cls, path: Optional[str], overrides: dict, sets: list[str]) -> "RunConfig":
        data = copy.deepcopy(DEFAULTS)
        base = Path.cwd()
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            try:
                data = _merge(data, json.loads(p.read_text(encoding="utf-8")))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{p}: invalid JSON ({exc})") from None
            base = p.resolve().parent
        for item in sets:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            _set_dotted(data, key.strip(), value)
        for key, value in overrides.items():
            if value is not None:
                if key == "out":
                    data["paths"]["out"] = value
                else:
                    data[key] = value
        return cls(data, base)

    def path(self, key: str) -> Optional[Path]:
        value = self.data["paths"].get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        return self.path("out")

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def system(self) -> str:
        return self.data["system"]

    def validate(self) -> None:
        if self.data.get("seed") is None:
            raise ConfigError("config must set 'seed'")
        try:
            int(self.data["seed"])
        except (TypeError, ValueError):
            raise ConfigError(f"seed must be an integer, got {self.data['seed']!r}") from None
        if self.system not in SYSTEMS:
            raise ConfigError(f"system must be one of {SYSTEMS}, got {self.system!r}")
        for key in ("tablestore", "train", "dev", "test"):
            if self.data["paths"].get(key) is None:
                raise ConfigError(f"paths.{key} is required")
        for key in ("tablestore", "train", "dev", "test", "concepts", "triples", "embeddings"):
            p = self.path(key)
            if p is not None and not p.exists():
                raise ConfigError(f"paths.{key} does not exist: {p}")
        self.feature_config()
        self.train_config("svr")
        self.train_config("ltr")

    def feature_config(self) -> FeatureConfig:
        f = self.data["features"]
        return FeatureConfig(tuple(f["groups"]), int(f["concept_top_k"]), int(f["rank_ceiling"]), f["embed_mode"])

    def train_config(self, learner: str, **changes) -> TrainConfig:
        section = dict(self.data[learner])
        section.update(changes)
        return TrainConfig(mode=LEARNED_SYSTEMS[learner], seed=self.seed, **section)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# corpus bundle


def _fact_to_dict(f: Fact) -> dict:
    return {"id": f.fact_id, "table": f.table_type, "text": f.text, "processed": f.processed.to_dict()}


def _qa_to_dict(qa: QaInstance) -> dict:
    return {
        "id": qa.qa_id,
        "question": qa.question,
        "answer": qa.correct_answer,
        "choices": list(qa.distractors),
        "gold": [[fid, role.value] for fid, role in qa.gold.entries] if qa.gold else None,
        "q": qa.q_processed.to_dict(),
        "ca": qa.ca_processed.to_dict(),
    }


def _qa_from_dict(d: dict) -> QaInstance:
    gold = GoldExplanation(tuple((fid, Role(r)) for fid, r in d["gold"])) if d["gold"] else None
    return QaInstance(
        d["id"], d["question"], d["answer"], tuple(d["choices"]), gold,
        ProcessedText.from_dict(d["q"]), ProcessedText.from_dict(d["ca"]),
    )


def write_bundle(store: Tablestore, splits: SplitSet, path: Path) -> None:
    payload = {
        "facts": [_fact_to_dict(f) for f in store],
        "splits": {name: [_qa_to_dict(qa) for qa in items] for name, items in splits.items()},
    }
    raw = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    buf = io.BytesIO()
    with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0, filename="") as gz:
        gz.write(raw)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(BUNDLE_MAGIC + bytes([BUNDLE_VERSION]) + buf.getvalue())


def read_bundle(path: Path) -> tuple[Tablestore, SplitSet]:
    if not path.is_file():
        raise MissingArtifact(f"corpus bundle not found: {path} (run 'ingest' first)")
    data = path.read_bytes()
    if not data.startswith(BUNDLE_MAGIC):
        raise CorpusError(f"{path}: not a corpus bundle")
    version = data[len(BUNDLE_MAGIC)]
    if version != BUNDLE_VERSION:
        raise CorpusError(f"{path}: bundle version {version}, expected {BUNDLE_VERSION}")
    payload = json.loads(gzip.decompress(data[len(BUNDLE_MAGIC) + 1 :]).decode("utf-8"))
    store = Tablestore(
        [Fact(d["id"], d["table"], d["text"], ProcessedText.from_dict(d["processed"])) for d in payload["facts"]]
    )
    splits = SplitSet(*[[_qa_from_dict(d) for d in payload["splits"][name]] for name in ("train", "dev", "test")])
    return store, splits


# ---------------------------------------------------------------------------
# helpers


def _bundle_path(cfg: RunConfig) -> Path:
    return cfg.out / "corpus.bundle"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_meta(cfg: RunConfig, command: str, extra: Optional[dict] = None) -> None:
    meta = {"command": command, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "config_digest": cfg.digest()}
    meta.update(extra or {})
    _write_text(cfg.out / f"{command}.meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _resources(cfg: RunConfig) -> Resources:
    res = Resources()
    groups = cfg.feature_config().groups
    if "cn" in groups and cfg.path("concepts") is not None:
        res.concepts = ConceptResource.load(cfg.path("concepts"))
    if "oie" in groups and cfg.path("triples") is not None:
        res.triples = TripleResource.load(cfg.path("triples"))
    if "emb" in groups and cfg.path("embeddings") is not None:
        res.embeddings = EmbeddingResource.load(cfg.path("embeddings"))
    return res


def _experiment(cfg: RunConfig) -> Experiment:
    store, splits = read_bundle(_bundle_path(cfg))
    fc = cfg.feature_config()
    return Experiment(store, splits, fc, _resources(cfg), cfg.seed, cfg.data["features"]["tfidf_depth"])


def _annotated(instances) -> list:
    return [qa for qa in instances if qa.gold is not None]


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig) -> int:
    tcfg = cfg.data["tablestore"]
    store = load_tablestore(cfg.path("tablestore"), tcfg["id_column"], tcfg["content_columns"] or None)
    splits = load_splits(cfg.path("train"), cfg.path("dev"), cfg.path("test"), store)
    write_bundle(store, splits, _bundle_path(cfg))
    annotated = _annotated(splits.train) + _annotated(splits.dev)
    print(f"Tablestore facts    {len(store)}")
    print(f"Split sizes         train {len(splits.train)}  dev {len(splits.dev)}  test {len(splits.test)}")
    if annotated:
        stats = corpus_stats(annotated, store)
        print(stats.format())
        _write_text(cfg.out / "corpus_stats.json", json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_meta(cfg, "ingest", {"facts": len(store)})
    return 0


def _model_paths(cfg: RunConfig) -> tuple[Path, Path]:
    return cfg.out / "model.bin", cfg.out / "space.json"


def cmd_train(cfg: RunConfig) -> int:
    if cfg.system in TFIDF_SYSTEMS:
        print(f"{cfg.system} has nothing to train")
        _write_meta(cfg, "train", {"system": cfg.system})
        return 0
    exp = _experiment(cfg)
    tc = cfg.train_config(cfg.system)
    model, space, providers = exp.train(tc)
    model_path, space_path = _model_paths(cfg)
    model.save(model_path)
    space.save(space_path)
    print(f"trained {cfg.system}: {len(space)} features, objective {model.history[-1]:.6g}")
    _write_meta(
        cfg, "train",
        {"system": cfg.system, "groups": space.group_counts(), "coverage": dict(providers.coverage),
         "objective_history": model.history},
    )
    return 0


def _predictions_path(cfg: RunConfig, split: str) -> Path:
    return cfg.out / "predictions" / f"{split}.tsv"


def cmd_predict(cfg: RunConfig) -> int:
    exp = _experiment(cfg)
    splits = ("dev", "test")
    if cfg.system in TFIDF_SYSTEMS:
        for split in splits:
            write_dump(exp.tfidf_rankings(cfg.system, getattr(exp.splits, split)).values(), _predictions_path(cfg, split))
    else:
        model_path, space_path = _model_paths(cfg)
        model = LinearModel.load(_require(model_path, "model file"))
        space = FeatureSpace.load(_require(space_path, "feature space"))
        if model.n_features != len(space):
            raise MissingArtifact(f"{model_path} does not match {space_path}; re-run 'train'")
        providers = exp.providers()
        for split in splits:
            (rankings,) = exp.score_split([model], space, providers, getattr(exp.splits, split))
            write_dump(rankings.values(), _predictions_path(cfg, split))
    for split in splits:
        print(f"wrote {_predictions_path(cfg, split)}")
    _write_meta(cfg, "predict", {"system": cfg.system})
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    store, splits = read_bundle(_bundle_path(cfg))
    k_grid = [int(k) for k in cfg.data["k_grid"]]
    done = {}
    for split in ("dev", "test"):
        instances = _annotated(getattr(splits, split))
        if not instances:
            continue
        dump = read_dump(_require(_predictions_path(cfg, split), "predictions"))
        report = evaluate(dump, instances, k_grid)
        base = cfg.out / "eval"
        _write_text(base / f"{split}.json", report.to_json() + "\n")
        _write_text(base / f"{split}_curves.csv", report.curves_csv())
        _write_text(base / f"{split}_by_length.csv", report.by_length_csv())
        done[split] = report.map
        print(f"{split} mAP {100 * report.map:.2f}")
    _write_meta(cfg, "evaluate", {"map": done})
    return 0


def cmd_tune(cfg: RunConfig) -> int:
    if cfg.system not in LEARNED_SYSTEMS:
        raise ConfigError(f"tune needs a learned system (svr or ltr), got {cfg.system!r}")
    c_grid = [float(c) for c in cfg.data["tune"]["C"]]
    neg_grid = sorted(int(n) for n in cfg.data["tune"]["n_neg"])
    if not c_grid or not neg_grid:
        raise ConfigError("tune grid is empty")
    exp = _experiment(cfg)
    providers = exp.providers()
    full = exp.training_set(max(neg_grid), providers)
    keys, models = [], []
    for n in neg_grid:
        data = full if n == max(neg_grid) else exp.restrict_negatives(full, n)
        for c in sorted(set(c_grid)):
            models.append(exp.fit(data, cfg.train_config(cfg.system, C=c, n_neg=n)))
            keys.append((c, n))
    scores = dict(zip(keys, exp.evaluate_models(models, full.space, providers, "dev")))
    result = tune(c_grid, neg_grid, lambda c, n: scores[(c, n)])
    lines = ["C,n_neg,dev_map"] + [f"{c:g},{n},{s:.6f}" for c, n, s in result.table]
    _write_text(cfg.out / "tune.csv", "\n".join(lines) + "\n")
    best = {"system": cfg.system, "C": result.best_C, "n_neg": result.best_n_neg, "dev_map": result.best_score}
    _write_text(cfg.out / "best_config.json", json.dumps(best, indent=2, sort_keys=True) + "\n")
    print(f"best C={result.best_C:g} n_neg={result.best_n_neg} dev mAP {100 * result.best_score:.2f}")
    _write_meta(cfg, "tune")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    ab = cfg.data["ablation"]
    exp = _experiment(cfg)
    has_test_gold = bool(_annotated(exp.splits.test))

    def run(groups, learner):
        model, space, providers = exp.train(cfg.train_config(learner), groups)
        (dev,) = exp.evaluate_models([model], space, providers, "dev")
        test = exp.evaluate_models([model], space, providers, "test")[0] if has_test_gold else None
        return dev, test

    rows = ablation_run(ab["base"], ab["addons"], ab["learners"], run)
    _write_text(cfg.out / "ablation.csv", ablation_csv(rows))
    for r in rows:
        print(f"{r.label:<24} {r.learner:<4} dev {100 * r.dev_map:6.2f}")
    _write_meta(cfg, "ablate")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    store, splits = read_bundle(_bundle_path(cfg))
    annotated = _annotated(splits.train) + _annotated(splits.dev)
    if not annotated:
        raise CorpusError("report needs annotated train or dev instances")
    dev_eval = EvalReport.from_json(_require(cfg.out / "eval" / "dev.json", "dev evaluation").read_text(encoding="utf-8"))
    base = cfg.out / "report"
    stats = corpus_stats(annotated, store)
    _write_text(base / "length_histogram.csv", "length,count\n" + "".join(
        f"{n},{c}\n" for n, c in stats.length_histogram.items()))
    _write_text(base / "table_percentages.csv", "table,percent\n" + "".join(
        f"{t},{p:.4f}\n" for t, p in stats.table_percentages.items()))

    props = table_rank_proportions(annotated, store)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buckets = list(next(iter(props.values())).keys()) if props else []
    w.writerow(["table"] + buckets)
    for table, shares in props.items():
        w.writerow([table] + [f"{shares[b]:.6f}" for b in buckets])
    _write_text(base / "table_rank_proportions.csv", buf.getvalue())
    _write_text(base / "pr_curves.csv", dev_eval.curves_csv())
    _write_text(base / "map_by_length.csv", map_by_length_csv(dev_eval.map_by_length))
    if stats.table_percentages:
        top, pct = next(iter(stats.table_percentages.items()))
        print(f"most used table: {top} ({pct:.2f}%)")
    print(f"wrote report CSVs to {base}")
    _write_meta(cfg, "report")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "tune": cmd_tune,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="explainrank", description="Explanation fact ranking experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--system", choices=SYSTEMS)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. svr.C=0.05 (repeatable)")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, {"seed": args.seed, "out": args.out, "system": args.system}, args.set)
        cfg.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg)
    except (ConfigError, CorpusError, MissingArtifact, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
