"""File-driven stages: data generation, reasoner SFT and GRPO, decoder training,
inference and evaluation.

Every stage reads its inputs from disk, writes its artifacts to disk and leaves
a run record (``reports/runs/<command>.json``) with the config hash, seed, wall
time and artifact checksums, also when the stage fails.
"""
from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .codec import GridSpec, block_labels_from_mask, coarse_mask_from_blocks, parse_runs, serialize_runs
from .decoder import DecoderSample, MaskGuidedDecoder, MGDConfig, predict, train_decoder
from .grpo import GrpoConfig, grpo_train
from .losses import ConfusionMatrix, LossConfig, confusion, metrics
from .netpbm import read_pgm_mask, read_ppm, write_pgm_mask
from .nn import load_checkpoint, save_checkpoint
from .reasoner import ReasonerPolicy, featurize, greedy_decode, sft_train
from .rewards import RewardConfig, total_reward
from .scenes import GenConfig, generate_dataset

SPLIT_SEED_OFFSET = {"train": 0, "test": 1_000_000, "robust": 2_000_000}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class MissingArtifactError(FileNotFoundError):
    """A stage needs an artifact (checkpoint, manifest) that an earlier stage did not produce."""


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 50
    lr: float = 1e-2
    batch_size: int = 16
    hidden: int = 32
    temperature: float = 1.0


@dataclass(frozen=True)
class DecoderTrainConfig:
    epochs: int = 8
    lr: float = 2e-3
    batch_size: int = 8
    coarse_source: str = "oracle"
    threshold: float = 0.5

    def __post_init__(self):
        if self.coarse_source not in ("oracle", "reasoner"):
            raise ValueError(f"decoder.coarse_source must be 'oracle' or 'reasoner', got {self.coarse_source!r}")


@dataclass(frozen=True)
class Paths:
    data_dir: str = "data"
    checkpoints_dir: str = "checkpoints"
    reports_dir: str = "reports"


@dataclass(frozen=True)
class GridDims:
    rows: int = 8
    cols: int = 8


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridDims = GridDims()
    gen: GenConfig = GenConfig()
    reward: RewardConfig = RewardConfig()
    sft: SftConfig = SftConfig()
    grpo: GrpoConfig = GrpoConfig(epochs=30)
    mgd: MGDConfig = MGDConfig()
    decoder: DecoderTrainConfig = DecoderTrainConfig()
    loss: LossConfig = LossConfig()
    paths: Paths = Paths()
    seed: int = 0
    n_test: int = 50

    def __post_init__(self):
        p = self.paths
        if len({p.data_dir, p.checkpoints_dir, p.reports_dir}) != 3:
            raise ConfigError("paths: data_dir, checkpoints_dir and reports_dir must be distinct")
        if (self.gen.grid_rows, self.gen.grid_cols) != (self.grid.rows, self.grid.cols):
            object.__setattr__(self, "gen", dataclasses.replace(self.gen, grid_rows=self.grid.rows, grid_cols=self.grid.cols))
        if (self.mgd.height, self.mgd.width) != (self.gen.h, self.gen.w):
            object.__setattr__(self, "mgd", dataclasses.replace(self.mgd, height=self.gen.h, width=self.gen.w))

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(self.grid.rows, self.grid.cols, self.gen.h, self.gen.w)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return _build(cls, data, "")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def with_overrides(self, overrides: dict[str, object]) -> "PipelineConfig":
        """Apply dotted-key overrides such as ``{"gen.change_rate": 0.0}``."""
        data = self.to_dict()
        for key, value in overrides.items():
            node = data
            *parents, leaf = key.split(".")
            for part in parents:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"{key}: unknown config section {part!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"{key}: unknown field")
            node[leaf] = value
        return PipelineConfig.from_dict(data)


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data, path: str, base=None):
    """Rebuild dataclass ``cls`` from plain data, filling gaps from ``base``."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    base = base if base is not None else (_DEFAULT if cls is PipelineConfig else cls())
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{sorted(unknown)[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        default = getattr(base, name)
        where = f"{path}.{name}" if path else name
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, where, default)
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        section = path.split(".")[-1] if path else ""
        if section and not msg.startswith(section):
            msg = f"{path}: {msg}"
        raise ConfigError(msg) from exc


_DEFAULT = PipelineConfig()


# ------------------------------------------------------------------ run records

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@contextlib.contextmanager
def run_record(cfg: PipelineConfig, command: str, inputs: list | None = None):
    """Yield a dict whose ``outputs`` list is checksummed into the run record on exit."""
    record = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "inputs": [str(p) for p in (inputs or [])],
        "outputs": [],
    }
    start = time.perf_counter()
    try:
        yield record
        record["status"] = "ok"
    except BaseException as exc:
        record["status"] = "error"
        record["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        record["wall_time_s"] = round(time.perf_counter() - start, 3)
        record["outputs"] = [str(p) for p in record["outputs"]]
        record["checksums"] = {p: _sha256(Path(p)) for p in record["outputs"] if Path(p).is_file()}
        runs = Path(cfg.paths.reports_dir) / "runs"
        with contextlib.suppress(OSError):
            runs.mkdir(parents=True, exist_ok=True)
            (runs / f"{command}.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------------ data access

@dataclass
class SceneRecord:
    name: str
    img_t1: np.ndarray
    img_t2: np.ndarray
    gt: np.ndarray
    seed: int
    gt_runs: str


def split_dir(cfg: PipelineConfig, split: str) -> Path:
    return Path(cfg.paths.data_dir) / split


def manifest_path(cfg: PipelineConfig, split: str) -> Path:
    return split_dir(cfg, split) / "manifest.json"


def load_scenes(manifest) -> list[SceneRecord]:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise MissingArtifactError(f"manifest not found: {manifest}")
    try:
        data = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{manifest}: invalid manifest JSON: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("scenes"), list):
        raise ConfigError(f"{manifest}: manifest must contain a 'scenes' list")
    root = manifest.parent
    out = []
    for entry in data["scenes"]:
        try:
            name = Path(entry["gt"]).name.rsplit("_", 1)[0]
            out.append(SceneRecord(
                name,
                read_ppm(root / entry["t1"]),
                read_ppm(root / entry["t2"]),
                read_pgm_mask(root / entry["gt"]),
                int(entry["seed"]),
                str(entry["gt_runs"]),
            ))
        except KeyError as exc:
            raise ConfigError(f"{manifest}: scene entry lacks {exc}") from exc
    return out


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingArtifactError(f"required artifact missing: {path}")
    return path


def _ckpt(cfg: PipelineConfig, name: str) -> Path:
    return Path(cfg.paths.checkpoints_dir) / name


def save_policy(policy: ReasonerPolicy, path: Path, extra: dict | None = None) -> None:
    meta = {"kind": "reasoner", "hidden": policy.hidden, "temperature": policy.temperature, **(extra or {})}
    save_checkpoint(path, policy.state_dict(), meta)


def load_policy(path: Path) -> ReasonerPolicy:
    arrays, meta = load_checkpoint(_require(path))
    policy = ReasonerPolicy(hidden=int(meta["hidden"]), temperature=float(meta["temperature"]))
    policy.load_state_dict(arrays)
    return policy


def save_decoder(model: MaskGuidedDecoder, path: Path, extra: dict | None = None) -> None:
    meta = {"kind": "decoder", "mgd": _to_plain(model.cfg), "alphas": model.alpha_values(), **(extra or {})}
    save_checkpoint(path, model.state_dict(), meta)


def load_decoder(path: Path) -> MaskGuidedDecoder:
    arrays, meta = load_checkpoint(_require(path))
    mgd = meta["mgd"]
    model = MaskGuidedDecoder(MGDConfig(**{**mgd, "channels": tuple(mgd["channels"])}))
    model.load_state_dict(arrays)
    return model


def _reasoner_checkpoint(cfg: PipelineConfig, which: str) -> Path:
    return _ckpt(cfg, "reasoner_grpo.ckpt" if which == "grpo" else "reasoner_sft.ckpt")


def coarse_masks(cfg: PipelineConfig, scenes: list[SceneRecord], source: str, reasoner: str = "grpo") -> list[np.ndarray]:
    grid = cfg.grid_spec
    if source == "oracle":
        return [coarse_mask_from_blocks(block_labels_from_mask(s.gt, grid)) for s in scenes]
    if source != "reasoner":
        raise ConfigError(f"coarse source must be 'oracle' or 'reasoner', got {source!r}")
    policy = load_policy(_reasoner_checkpoint(cfg, reasoner))
    return [coarse_mask_from_blocks(greedy_decode(policy, featurize(s.img_t1, s.img_t2, grid), grid)) for s in scenes]


# ------------------------------------------------------------------ commands

def cmd_gen_data(cfg: PipelineConfig, n: int, split: str = "train", seed_offset: int | None = None) -> Path:
    offset = SPLIT_SEED_OFFSET.get(split, 0) if seed_offset is None else seed_offset
    gen = dataclasses.replace(cfg.gen, seed=cfg.gen.seed + offset)
    out = split_dir(cfg, split)
    with run_record(cfg, f"gen-data-{split}") as rec:
        manifest = generate_dataset(gen, n, out, cfg.grid_spec)
        rec["outputs"] = [out / "manifest.json"] + [out / s[k] for s in manifest["scenes"] for k in ("t1", "t2", "gt")]
    return out / "manifest.json"


def cmd_sft(cfg: PipelineConfig, split: str = "train") -> Path:
    mpath = manifest_path(cfg, split)
    with run_record(cfg, "sft", [mpath]) as rec:
        scenes = load_scenes(mpath)
        grid = cfg.grid_spec
        dataset = [(featurize(s.img_t1, s.img_t2, grid), parse_runs(s.gt_runs, grid)) for s in scenes]
        policy = ReasonerPolicy(cfg.sft.hidden, cfg.sft.temperature, seed=cfg.seed)
        curve = sft_train(policy, dataset, cfg.sft.epochs, cfg.sft.lr, cfg.sft.batch_size, seed=cfg.seed)
        out = _ckpt(cfg, "reasoner_sft.ckpt")
        out.parent.mkdir(parents=True, exist_ok=True)
        save_policy(policy, out)
        report = Path(cfg.paths.reports_dir) / "sft_loss.json"
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(json.dumps({"loss": curve}) + "\n")
        rec["outputs"] = [out, report]
    return out


def cmd_grpo(cfg: PipelineConfig, split: str = "train", manifest=None) -> Path:
    mpath = Path(manifest) if manifest else manifest_path(cfg, split)
    init = _ckpt(cfg, "reasoner_sft.ckpt")
    with run_record(cfg, "grpo", [mpath, init]) as rec:
        policy = load_policy(init)
        scenes = load_scenes(mpath)
        grid = cfg.grid_spec
        prompts = [(featurize(s.img_t1, s.img_t2, grid), parse_runs(s.gt_runs, grid)) for s in scenes]
        log = Path(cfg.paths.reports_dir) / "grpo_log.jsonl"
        log.parent.mkdir(parents=True, exist_ok=True)
        grpo_cfg = dataclasses.replace(cfg.grpo, seed=cfg.grpo.seed + cfg.seed)
        grpo_train(policy, prompts, grpo_cfg, cfg.reward, log_path=log)
        out = _ckpt(cfg, "reasoner_grpo.ckpt")
        save_policy(policy, out)
        rec["outputs"] = [out, log]
    return out


def cmd_train_decoder(cfg: PipelineConfig, split: str = "train", coarse: str | None = None,
                      reasoner: str = "grpo") -> Path:
    mpath = manifest_path(cfg, split)
    source = coarse or cfg.decoder.coarse_source
    with run_record(cfg, "train-decoder", [mpath]) as rec:
        scenes = load_scenes(mpath)
        masks = coarse_masks(cfg, scenes, source, reasoner)
        samples = [DecoderSample(s.img_t1, s.img_t2, s.gt, m) for s, m in zip(scenes, masks)]
        model = MaskGuidedDecoder(cfg.mgd, seed=cfg.seed)
        curve = train_decoder(model, samples, cfg.decoder.epochs, cfg.decoder.lr, cfg.decoder.batch_size,
                              cfg.loss, seed=cfg.seed)
        out = _ckpt(cfg, "decoder.ckpt")
        out.parent.mkdir(parents=True, exist_ok=True)
        save_decoder(model, out, {"coarse_source": source})
        report = Path(cfg.paths.reports_dir) / "decoder_loss.json"
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(json.dumps({"loss": curve}) + "\n")
        rec["outputs"] = [out, report]
    return out


def pred_dir(cfg: PipelineConfig, split: str) -> Path:
    return Path(cfg.paths.reports_dir) / "pred" / split


def cmd_infer(cfg: PipelineConfig, split: str = "test", coarse: str = "reasoner", reasoner: str = "grpo") -> Path:
    """Reasoner blocks -> coarse mask -> decoder; writes one PGM per scene plus a JSON sidecar."""
    mpath = manifest_path(cfg, split)
    dec_path = _ckpt(cfg, "decoder.ckpt")
    with run_record(cfg, f"infer-{split}", [mpath, dec_path]) as rec:
        model = load_decoder(dec_path)
        if not cfg.mgd.guidance:
            for a in model.alphas:
                a.data = np.zeros_like(a.data)
        scenes = load_scenes(mpath)
        masks = coarse_masks(cfg, scenes, coarse, reasoner)
        preds = predict(model, np.stack([s.img_t1 for s in scenes]), np.stack([s.img_t2 for s in scenes]),
                        np.stack(masks), cfg.decoder.threshold) if scenes else []
        out = pred_dir(cfg, split)
        out.mkdir(parents=True, exist_ok=True)
        outputs = []
        for s, p, m in zip(scenes, preds, masks):
            write_pgm_mask(out / f"{s.name}_pred.pgm", p)
            write_pgm_mask(out / f"{s.name}_coarse.pgm", m)
            outputs += [out / f"{s.name}_pred.pgm", out / f"{s.name}_coarse.pgm"]
        sidecar = out / "prediction.json"
        sidecar.write_text(json.dumps({
            "threshold": cfg.decoder.threshold,
            "alphas": model.alpha_values(),
            "coarse_source": coarse,
        }, indent=1, sort_keys=True) + "\n")
        rec["outputs"] = outputs + [sidecar]
    return out


def _scene_key(path: Path) -> str:
    stem = path.stem
    for suffix in ("_pred", "_gt"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def evaluate_dirs(pred: Path, gt: Path) -> dict:
    """Pair ``*_pred.pgm`` / ``*_gt.pgm`` (or same-named) masks and micro-average metrics."""
    preds = {_scene_key(p): p for p in sorted(Path(pred).glob("*.pgm")) if not p.stem.endswith("_coarse")}
    gts = {_scene_key(p): p for p in sorted(Path(gt).glob("*.pgm")) if not p.stem.endswith("_coarse")}
    if not gts:
        raise MissingArtifactError(f"no ground-truth masks in {gt}")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise MissingArtifactError(f"no prediction for {len(missing)} scene(s), e.g. {missing[0]} in {pred}")
    total = ConfusionMatrix()
    per_scene = []
    for key in sorted(gts):
        cm = confusion(read_pgm_mask(preds[key]), read_pgm_mask(gts[key]))
        total = total + cm
        per_scene.append({"scene": key, **dataclasses.asdict(cm), **metrics(cm)})
    agg = metrics(total)
    return {
        "per_scene": per_scene,
        "confusion": dataclasses.asdict(total),
        "aggregate": agg,
        "aggregate_percent": {k: round(100.0 * v, 4) for k, v in agg.items()},
    }


def cmd_eval(cfg: PipelineConfig, split: str = "test", pred=None, gt=None, out=None) -> dict:
    pred = Path(pred) if pred else pred_dir(cfg, split)
    gt = Path(gt) if gt else split_dir(cfg, split)
    with run_record(cfg, f"eval-{split}", [pred, gt]) as rec:
        report = evaluate_dirs(pred, gt)
        path = Path(out) if out else Path(cfg.paths.reports_dir) / f"eval_{split}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        rec["outputs"] = [path]
    return report


def score_records(records: list[dict], grid: GridSpec, reward_cfg: RewardConfig, scenes: list | None = None) -> dict:
    """Score ``{raw_text, gt_runs}`` records (or ``{raw_text, scene}`` with a manifest)."""
    lines = []
    for i, rec in enumerate(records):
        if "raw_text" not in rec:
            raise ConfigError(f"prediction line {i + 1}: missing 'raw_text'")
        if "gt_runs" in rec:
            runs = rec["gt_runs"]
        elif scenes is not None and "scene" in rec:
            runs = scenes[int(rec["scene"])]["gt_runs"]
        else:
            raise ConfigError(f"prediction line {i + 1}: needs 'gt_runs' (or 'scene' with a manifest)")
        br = total_reward(rec["raw_text"], parse_runs(runs, grid), reward_cfg)
        lines.append(dataclasses.asdict(br))
    n = len(lines)
    agg = {k: (sum(line[k] for line in lines) / n if n else 0.0)
           for k in ("r_format", "precision", "recall", "r_acc", "r_bonus", "total")}
    return {"lines": lines, "aggregate": {"count": n, **{f"mean_{k}": v for k, v in agg.items()}}}


def cmd_score(cfg: PipelineConfig, predictions, manifest=None, out=None) -> dict:
    predictions = Path(predictions)
    with run_record(cfg, "score", [predictions] + ([manifest] if manifest else [])) as rec:
        if not predictions.is_file():
            raise MissingArtifactError(f"predictions file not found: {predictions}")
        records = []
        for lineno, line in enumerate(predictions.read_text().splitlines(), 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{predictions}:{lineno}: invalid JSON: {exc}") from exc
        scenes = None
        if manifest:
            mpath = Path(manifest)
            if not mpath.is_file():
                raise MissingArtifactError(f"manifest not found: {mpath}")
            scenes = json.loads(mpath.read_text())["scenes"]
        result = score_records(records, cfg.grid_spec, cfg.reward, scenes)
        out = Path(out) if out else Path(cfg.paths.reports_dir) / "score.jsonl"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("".join(json.dumps(line, sort_keys=True) + "\n" for line in result["lines"]))
        summary = out.with_suffix(".summary.json")
        summary.write_text(json.dumps(result["aggregate"], indent=1, sort_keys=True) + "\n")
        rec["outputs"] = [out, summary]
    return result


def cmd_encode(mask_path, grid: GridSpec, tau: float = 0.0) -> str:
    """Canonical run string of the blocks touched by a PGM mask."""
    path = Path(mask_path)
    if not path.is_file():
        raise MissingArtifactError(f"mask not found: {path}")
    mask = read_pgm_mask(path)
    if mask.shape != (grid.image_h, grid.image_w):
        grid = GridSpec(grid.rows, grid.cols, *mask.shape)
    return serialize_runs(block_labels_from_mask(mask, grid, tau))


def cmd_decode(run_string: str, grid: GridSpec, out_path) -> Path:
    """Write the coarse block mask of a run string as a PGM."""
    labels = parse_runs(run_string, grid)
    out = Path(out_path)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm_mask(out, coarse_mask_from_blocks(labels))
    return out
