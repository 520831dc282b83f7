"""Five-phase robustness experiment: orchestration, metrics log, result tables, galleries."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import yaml

from .attack import AdversarialBatch, AttackConfig, difference_image, save_triplet
from .bleu import BleuReport, EvalPair, corpus_bleu
from .data import (CaptionDataset, Vocabulary, build_vocabulary, detokenize, encode_split, load_coco_captions,
                   load_flickr8k, load_manifest, load_split, make_toy_corpus, save_split, split_corpus)
from .errors import ConfigError, VocabularyMismatchError
from .model import CaptionModel, ModelConfig, generate_caption, load_checkpoint
from .training import (FROZEN_GROUP, PHASES, TrainConfig, TrainedArtifact, build_adversarial_dataset,
                       run_trials, summarize, train_baseline)

log = logging.getLogger(__name__)

ROW_LABELS = {
    "baseline": "Baseline BLEU Score",
    "adv_only": "Adversarial Example",
    "adv_mixed": "Adversarial Training",
    "freeze_encoder": "Adversarial Training by freezing ViT",
    "freeze_decoder": "Adversarial Training by freezing GPT",
}
SPLITS = ("train", "test")
CONDITIONS = ("clean", "adversarial")

DEFAULT_PHASE_SETTINGS = {
    # memorizing the toy corpus needs a longer, larger-step run than the fine-tuning phases
    "baseline": {"epochs": 400, "batch_size": 8, "learning_rate": 1e-3},
    "adv_only": {"epochs": 30, "batch_size": 16, "learning_rate": 3e-4},
    "adv_mixed": {"epochs": 30, "batch_size": 16, "learning_rate": 3e-4},
    "freeze_encoder": {"epochs": 30, "batch_size": 16, "learning_rate": 3e-4},
    "freeze_decoder": {"epochs": 30, "batch_size": 16, "learning_rate": 3e-4},
}


# -- configuration ----------------------------------------------------------

@dataclass
class CorpusSpec:
    kind: str = "toy"  # toy | flickr8k | coco
    root: str | None = None
    annotation: str | None = None
    num_images: int = 64
    image_size: int = 32
    train_fraction: float = 0.8
    min_frequency: int = 1

    def __post_init__(self):
        if self.kind not in ("toy", "flickr8k", "coco"):
            raise ConfigError(f"unknown corpus kind {self.kind!r}")
        if self.kind == "coco" and not (self.annotation and self.root):
            raise ConfigError("coco corpus needs both annotation and root (image directory)")
        if self.kind == "flickr8k" and not self.root:
            raise ConfigError("flickr8k corpus needs root")


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(max_caption_len=12))
    attack: AttackConfig = field(default_factory=AttackConfig)
    phases: dict[str, TrainConfig] = field(default_factory=dict)
    score_both_conditions: bool = True

    def __post_init__(self):
        given = dict(self.phases)
        unknown = set(given) - set(PHASES)
        if unknown:
            raise ConfigError(f"unknown phases in config: {sorted(unknown)}")
        self.phases = {}
        for name in PHASES:
            p = given.get(name)
            if p is None:
                p = TrainConfig(phase=name, seed=self.seed, attack=self.attack, **DEFAULT_PHASE_SETTINGS[name])
            elif p.phase != name:
                raise ConfigError(f"phase entry {name!r} holds a {p.phase!r} config")
            self.phases[name] = p

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "corpus": dataclasses.asdict(self.corpus),
            "model": self.model.to_dict(),
            "attack": self.attack.to_dict(),
            "phases": {k: {kk: vv for kk, vv in v.to_dict().items() if kk != "phase"} for k, v in self.phases.items()},
            "score_both_conditions": self.score_both_conditions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        seed = int(d.get("seed", 0))
        attack = AttackConfig(**d.get("attack", {}))
        phases = {}
        for name, overrides in (d.get("phases") or {}).items():
            if name not in PHASES:
                raise ConfigError(f"unknown phase {name!r}")
            merged = {**DEFAULT_PHASE_SETTINGS[name], "seed": seed, **(overrides or {})}
            merged["attack"] = AttackConfig(**merged["attack"]) if "attack" in merged else attack
            phases[name] = TrainConfig(phase=name, **merged)
        model = ModelConfig(**{**ModelConfig(max_caption_len=12).to_dict(), **d.get("model", {})})
        return cls(seed=seed, corpus=CorpusSpec(**d.get("corpus", {})), model=model, attack=attack,
                   phases=phases, score_both_conditions=bool(d.get("score_both_conditions", True)))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["seed"] = seed
        for p in d["phases"].values():
            p["seed"] = seed
        return ExperimentConfig.from_dict(d)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})


# -- evaluation -------------------------------------------------------------

def evaluate_model(model: CaptionModel, data: CaptionDataset, batch_size: int = 256) -> BleuReport:
    candidates = []
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        candidates += generate_caption(data.images(idx), model).tokens
    return corpus_bleu([EvalPair(c, r) for c, r in zip(candidates, data.references)])


@dataclass
class MetricsEntry:
    phase: str
    split: str
    condition: str
    bleu: BleuReport
    checkpoint: str
    config_hash: str
    trial: int = 0
    seed: int | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bleu"] = self.bleu.to_dict()
        return d


class MetricsLog:
    """Append-only line-delimited log; every write goes through this one appender."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, entry: MetricsEntry):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


def evaluate_checkpoint(checkpoint, data: CaptionDataset, vocab: Vocabulary, condition: str, split: str = "test",
                        phase: str | None = None, config_hash: str = "") -> MetricsEntry:
    if condition not in CONDITIONS:
        raise ConfigError(f"condition must be one of {CONDITIONS}")
    model, extra = load_checkpoint(checkpoint)
    stored = extra.get("vocabulary")
    if stored is not None and Vocabulary.from_dict(stored) != vocab:
        raise VocabularyMismatchError(f"{checkpoint} was trained with a different vocabulary")
    if model.config.vocab_size != len(vocab):
        raise VocabularyMismatchError(
            f"checkpoint vocab_size {model.config.vocab_size} != corpus vocabulary {len(vocab)}")
    return MetricsEntry(phase or extra.get("phase", "unknown"), split, condition, evaluate_model(model, data),
                        str(checkpoint), config_hash or extra.get("config_hash", ""),
                        extra.get("trial", 0), extra.get("seed"))


# -- report -----------------------------------------------------------------

@dataclass
class PhaseRow:
    phase: str
    condition: str  # which evaluation condition feeds the Train/Test columns
    scores: dict  # condition -> split -> {"mean", "std", "values"}
    trials: int
    seeds: list[int]

    @property
    def label(self) -> str:
        return ROW_LABELS[self.phase]

    def value(self, split: str, condition: str | None = None) -> float:
        return self.scores[condition or self.condition][split]["mean"]

    def std(self, split: str, condition: str | None = None) -> float:
        return self.scores[condition or self.condition][split]["std"]

    def to_dict(self) -> dict:
        return {"phase": self.phase, "label": self.label, "condition": self.condition, "trials": self.trials,
                "seeds": self.seeds, "train": self.value("train"), "test": self.value("test"),
                "train_std": self.std("train"), "test_std": self.std("test"), "scores": self.scores}

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseRow":
        return cls(d["phase"], d["condition"], d["scores"], d["trials"], d["seeds"])


@dataclass
class ExperimentReport:
    rows: list[PhaseRow]
    provenance: dict
    errors: list[dict] = field(default_factory=list)
    timestamps: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return [r.phase for r in self.rows] == list(PHASES) and not self.errors

    def row(self, phase: str) -> PhaseRow:
        return next(r for r in self.rows if r.phase == phase)

    def payload(self) -> dict:
        return {"complete": self.complete, "provenance": self.provenance, "errors": self.errors,
                "rows": [r.to_dict() for r in self.rows]}

    def payload_bytes(self) -> bytes:
        return json.dumps(self.payload(), sort_keys=True, indent=1).encode()

    def save(self, path) -> Path:
        path = Path(path)
        doc = {"payload": self.payload(), "payload_sha256": hashlib.sha256(self.payload_bytes()).hexdigest(),
               "timestamps": self.timestamps}
        path.write_text(json.dumps(doc, sort_keys=True, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        doc = json.loads(Path(path).read_text())
        p = doc["payload"]
        return cls([PhaseRow.from_dict(r) for r in p["rows"]], p["provenance"], p.get("errors", []),
                   doc.get("timestamps", {}))


TABLE_FORMATS = ("plain", "delimited", "markup")
_CSV_FIELDS = ["Model", "Train Set", "Test Set", "Train Std", "Test Std", "Trials", "Condition"]


def render_table(report: ExperimentReport, fmt: str = "plain", digits: int = 4) -> str:
    if fmt not in TABLE_FORMATS:
        raise ConfigError(f"table format must be one of {TABLE_FORMATS}")
    by_phase = {r.phase: r for r in report.rows}
    rows = [by_phase[p] for p in PHASES if p in by_phase]
    banner = "" if report.complete else "INCOMPLETE: missing " + ", ".join(
        p for p in PHASES if p not in by_phase)

    if fmt == "delimited":
        buf = io.StringIO()
        if banner:
            buf.write(f"# {banner}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_CSV_FIELDS)
        for r in rows:
            w.writerow([r.label, repr(r.value("train")), repr(r.value("test")), repr(r.std("train")),
                        repr(r.std("test")), r.trials, r.condition])
        return buf.getvalue()

    def cell(r: PhaseRow, split: str) -> str:
        text = f"{r.value(split):.{digits}f}"
        if r.phase in FROZEN_GROUP:
            text += f" ± {r.std(split):.{digits}f}"
        return text

    body = [(r.label, cell(r, "train"), cell(r, "test")) for r in rows]
    header = ("Model", "Train Set", "Test Set")
    if fmt == "markup":
        lines = [f"**{banner}**", ""] if banner else []
        lines += ["| " + " | ".join(header) + " |", "|:--|--:|--:|"]
        lines += ["| " + " | ".join(b) + " |" for b in body]
        notes = [f"freeze rows: mean ± sample std over {by_phase[p].trials} trials"
                 for p in FROZEN_GROUP if p in by_phase][:1]
        return "\n".join(lines + ([""] + notes if notes else [])) + "\n"

    widths = [max(len(x[i]) for x in [header, *body]) for i in range(3)]
    fmt_row = lambda cells: "  ".join(  # noqa: E731
        c.ljust(widths[i]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(cells))
    rule = "-" * (sum(widths) + 4)
    lines = [banner] if banner else []
    lines += [rule, fmt_row(header), rule, *map(fmt_row, body), rule]
    return "\n".join(lines) + "\n"


def parse_delimited(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(lines):
        out.append({"label": rec["Model"], "train": float(rec["Train Set"]), "test": float(rec["Test Set"]),
                    "train_std": float(rec["Train Std"]), "test_std": float(rec["Test Std"]),
                    "trials": int(rec["Trials"]), "condition": rec["Condition"]})
    return out


# -- gallery ----------------------------------------------------------------

def emit_gallery(out_dir, model: CaptionModel, clean: CaptionDataset, adv: CaptionDataset, vocab: Vocabulary,
                 n_samples: int = 3) -> list[Path]:
    """Write ``n_samples`` original|perturbed|difference panels and a ``captions.json`` sidecar."""
    if list(clean.ids) != list(adv.ids):
        raise ConfigError("clean and adversarial splits are not aligned")
    if n_samples > len(clean):
        log.warning("n_samples=%d exceeds split size %d; clipping", n_samples, len(clean))
        n_samples = len(clean)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    idx = torch.arange(n_samples)
    original = clean.images(idx)
    perturbed = adv.images(idx)
    diff = difference_image(original, AdversarialBatch(perturbed, list(perturbed.ids),
                                                       perturbed.pixels - original.pixels))
    clean_caps = generate_caption(original, model).tokens
    adv_caps = generate_caption(perturbed, model).tokens
    paths, sidecar = [], []
    for k, image_id in enumerate(original.ids):
        paths.append(save_triplet(original.pixels[k], perturbed.pixels[k], diff[k], out_dir / f"{k:03d}_{image_id}.png"))
        sidecar.append({"image_id": image_id, "panel": paths[-1].name,
                        "references": [detokenize(r, vocab) for r in clean.references[k]],
                        "clean_caption": detokenize(clean_caps[k], vocab),
                        "perturbed_caption": detokenize(adv_caps[k], vocab),
                        "max_abs_perturbation": float((perturbed.pixels[k] - original.pixels[k]).abs().max())})
    side = out_dir / "captions.json"
    side.write_text(json.dumps(sidecar, indent=1))
    return paths + [side]


# -- orchestration ----------------------------------------------------------

def _manifest_hash(root: Path) -> str | None:
    path = root / "manifest.json"
    return json.loads(path.read_text()).get("config_hash") if path.exists() else None


def _attack_tag(attack: AttackConfig) -> str:
    return f"eps{attack.epsilon:g}_clamp{attack.clamp_min:g}-{attack.clamp_max:g}"


class Experiment:
    """Runs the five phases under ``out``; each finished phase is persisted and skipped on rerun."""

    def __init__(self, cfg: ExperimentConfig, out, force: bool = False):
        self.cfg = cfg
        self.out = Path(out)
        self.force = force
        self.config_hash = cfg.config_hash()
        self.metrics = MetricsLog(self.out / "metrics.jsonl")
        self.train_log = self.out / "logs" / "train.jsonl"
        self.vocab: Vocabulary | None = None
        self.splits: dict[str, CaptionDataset] = {}
        self._adv: dict[str, dict[str, CaptionDataset]] = {}
        self._baseline: CaptionModel | None = None
        self.split_sizes: dict[str, int] = {}

    # data
    def prepare_data(self):
        if self.splits:
            return
        c = self.cfg.corpus
        if c.kind == "toy":
            root = self.out / "data"
            meta = json.loads((root / "manifest.json").read_text()) if (root / "manifest.json").exists() else {}
            wanted = {"seed": self.cfg.seed, "image_size": c.image_size, "num_images": c.num_images}
            if not self.force and all(meta.get(k) == v for k, v in wanted.items()):
                corpora = load_manifest(root)
                train, test = corpora["train"], corpora["test"]
            else:
                train, test = make_toy_corpus(self.cfg.seed, c.num_images, c.image_size, root, c.train_fraction)
        elif c.kind == "flickr8k":
            train, test = load_flickr8k(c.root, seed=self.cfg.seed)
        else:
            train, test = split_corpus(load_coco_captions(c.annotation, c.root), self.cfg.seed, c.train_fraction)
        if train.ids() & test.ids():
            raise ConfigError("train and test splits share images")
        self.vocab = build_vocabulary(train, c.min_frequency)
        (self.out / "vocab.json").parent.mkdir(parents=True, exist_ok=True)
        (self.out / "vocab.json").write_text(json.dumps(self.vocab.to_dict()))
        size, max_len = self.cfg.model.image_size, self.cfg.model.max_caption_len
        self.splits = {"train": encode_split(train, self.vocab, size, max_len),
                       "test": encode_split(test, self.vocab, size, max_len)}
        self.split_sizes = {k: len(v) for k, v in self.splits.items()}
        self.corpus_name = train.name

    @property
    def model_config(self) -> ModelConfig:
        self.prepare_data()
        return dataclasses.replace(self.cfg.model, vocab_size=len(self.vocab))

    def checkpoint_path(self, phase: str, trial: int | None = None) -> Path:
        name = phase if trial is None else f"{phase}_trial{trial}"
        return self.out / "checkpoints" / f"{name}.pt"

    def _save(self, art: TrainedArtifact, path: Path, trial: int | None = None) -> Path:
        return art.save(path, {"vocabulary": self.vocab.to_dict(), "config_hash": self.config_hash,
                               "trial": trial or 0})

    # phase 1 and the static adversarial splits
    def baseline_model(self) -> CaptionModel:
        if self._baseline is None:
            path = self.checkpoint_path("baseline")
            if not (path.exists() and self._phase_done("baseline")):
                self.run_phase("baseline")
            if self._baseline is None:
                self._baseline, _ = load_checkpoint(path)
        return self._baseline

    def adversarial_splits(self, attack: AttackConfig | None = None) -> dict[str, CaptionDataset]:
        attack = attack or self.cfg.attack
        tag = _attack_tag(attack)
        if tag in self._adv:
            return self._adv[tag]
        self.prepare_data()
        root = self.out / "adversarial" / tag
        if not self.force and all(_manifest_hash(root / s) == self.config_hash for s in SPLITS):
            adv = {s: load_split(root / s) for s in SPLITS}
        else:
            model = self.baseline_model()
            adv = {}
            for s in SPLITS:
                adv[s] = build_adversarial_dataset(model, self.splits[s], attack)
                save_split(adv[s], root / s, source_split=s,
                           extra={"attack": attack.to_dict(), "config_hash": self.config_hash,
                                  "source_checkpoint": str(self.checkpoint_path("baseline"))})
        self._adv[tag] = adv
        return adv

    # evaluation of one trained model on every split/condition it is scored under
    def _evaluate(self, phase: str, model: CaptionModel, ckpt: Path, trial: int, seed: int) -> dict[str, float]:
        row_condition = "clean" if phase == "baseline" else "adversarial"
        conditions = CONDITIONS if self.cfg.score_both_conditions else (row_condition,)
        adv = self.adversarial_splits(self.cfg.phases[phase].attack) if "adversarial" in conditions else None
        scores = {}
        for cond in conditions:
            for split in SPLITS:
                data = self.splits[split] if cond == "clean" else adv[split]
                report = evaluate_model(model, data)
                self.metrics.append(MetricsEntry(phase, split, cond, report, str(ckpt), self.config_hash,
                                                 trial, seed))
                scores[f"{cond}/{split}"] = report.score
        return scores

    def _phase_file(self, phase: str) -> Path:
        return self.out / "phases" / f"{phase}.json"

    def _phase_done(self, phase: str) -> bool:
        p = self._phase_file(phase)
        return p.exists() and json.loads(p.read_text()).get("config_hash") == self.config_hash

    def run_phase(self, phase: str) -> PhaseRow:
        if self._phase_done(phase) and not self.force:
            log.info("phase %s already complete; skipping", phase)
            return PhaseRow.from_dict(json.loads(self._phase_file(phase).read_text())["row"])
        self.prepare_data()
        cfg = self.cfg.phases[phase]
        t0 = time.time()
        if phase == "baseline":
            art = train_baseline(self.splits["train"], cfg, self.model_config, self.train_log)
            path = self._save(art, self.checkpoint_path("baseline"))
            self._baseline = art.model
            summary = summarize([self._evaluate(phase, art.model, path, 0, cfg.seed)], [cfg.seed])
        else:
            paths: list[Path] = []

            def keep(k: int, art: TrainedArtifact):
                trial = k if cfg.trials > 1 else None
                paths.append(self._save(art, self.checkpoint_path(phase, trial), trial))

            def score(art: TrainedArtifact) -> dict[str, float]:
                return self._evaluate(phase, art.model, paths[-1], len(paths) - 1, art.seed)

            summary = run_trials(cfg, self.splits["train"], self.adversarial_splits(cfg.attack)["train"],
                                 self.baseline_model(), score, on_trial=keep, log_path=self.train_log)
        values, seeds = summary.values, summary.seeds
        scores: dict = {}
        for key in summary.mean:
            cond, split = key.split("/")
            scores.setdefault(cond, {})[split] = {"mean": summary.mean[key], "std": summary.std[key],
                                                  "values": [v[key] for v in values]}
        row = PhaseRow(phase, "clean" if phase == "baseline" else "adversarial", scores, len(values), seeds)
        self._phase_file(phase).parent.mkdir(parents=True, exist_ok=True)
        self._phase_file(phase).write_text(json.dumps({"config_hash": self.config_hash, "row": row.to_dict(),
                                                       "seconds": time.time() - t0}, indent=1))
        log.info("phase %s: train %.4f test %.4f (%s)", phase, row.value("train"), row.value("test"), row.condition)
        return row

    def run(self, phases: Sequence[str] = PHASES) -> ExperimentReport:
        started = time.strftime("%Y-%m-%dT%H:%M:%S")
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg.dump(self.out / "config.yaml")
        self.prepare_data()
        rows, errors = [], []
        for phase in phases:
            try:
                rows.append(self.run_phase(phase))
            except Exception as exc:  # recorded in the report; later phases may still run
                log.exception("phase %s failed", phase)
                errors.append({"phase": phase, "error": f"{type(exc).__name__}: {exc}"})
                if phase == "baseline":
                    break
        report = ExperimentReport(rows, self.provenance(), errors,
                                  {"started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S")})
        self.write_report(report)
        return report

    def provenance(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "corpus": getattr(self, "corpus_name", self.cfg.corpus.kind),
            "split_sizes": self.split_sizes,
            "seeds": {p: self.cfg.phases[p].seed for p in PHASES},
            "attack": self.cfg.attack.to_dict(),
            "evaluation_pairing": {"baseline": "clean", **{p: "adversarial" for p in PHASES[1:]}},
            "adversarial_examples": "generated once against the baseline checkpoint and reused by every phase",
            "initialization": "phases after the baseline continue from the baseline checkpoint",
            "bleu": "corpus BLEU-4, uniform weights, zero counts floored at 1e-9",
        }

    def write_report(self, report: ExperimentReport):
        report.save(self.out / "report.json")
        for fmt, name in (("plain", "report.txt"), ("delimited", "report.csv"), ("markup", "report.md")):
            (self.out / name).write_text(render_table(report, fmt))

    def gallery(self, n_samples: int = 3, split: str = "test", checkpoint=None) -> list[Path]:
        self.prepare_data()
        model = load_checkpoint(checkpoint)[0] if checkpoint else self.baseline_model()
        adv = self.adversarial_splits()
        return emit_gallery(self.out / "gallery", model, self.splits[split], adv[split], self.vocab, n_samples)


def run_experiment(cfg: ExperimentConfig, out, force: bool = False) -> ExperimentReport:
    return Experiment(cfg, out, force).run()
