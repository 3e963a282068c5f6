"""Transfer scenarios, report tables and single-image prediction."""

import hashlib
import json
import logging
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import CLASS_NAMES, SPECIES, load_patches, mask_to_uint8, read_png, resize_image, write_png
from .exceptions import ConfigError, DataError, ValidationError
from .metrics import AVERAGE, evaluate_model, read_csv, sort_records, write_csv
from .network import init_params, load_checkpoint
from .training import SELECTION_SETS, TrainingHistory, binarize, criterion_set, fit, predict_proba, select_checkpoint
from .validation import check_class_id

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    name: str
    train_species: tuple
    criterion: str
    test_species: str

    @property
    def train_key(self):
        return "+".join(self.train_species)


SCENARIOS = {
    "M2M": Scenario("M2M", ("mouse",), "VM", "mouse"),
    "M2H_VM": Scenario("M2H_VM", ("mouse",), "VM", "human"),
    "M2H_VH": Scenario("M2H_VH", ("mouse",), "VH", "human"),
    "H2H": Scenario("H2H", ("human",), "VH", "human"),
    "MH2H": Scenario("MH2H", ("mouse", "human"), "VH", "human"),
}


def get_scenario(name):
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; expected one of {', '.join(SCENARIOS)}") from None


@dataclass
class Report:
    scenario: str
    csv_path: Path
    table_path: Path
    meta_path: Path
    records: list
    selected_epoch: int
    checkpoint: str
    masks_read: list = field(default_factory=list)


# -- data plumbing ----------------------------------------------------------


def _entries(cfg, split, species):
    """(entries, root) groups from every configured manifest."""
    groups = []
    for manifest, root in cfg.load_manifests():
        ents = manifest.subset(split=split, species=species)
        if ents:
            groups.append((ents, root))
    return groups


def load_split(cfg, split, species, audit=None):
    """Load one split of one species from every configured manifest."""
    patches = []
    for ents, root in _entries(cfg, split, species):
        patches.extend(load_patches(ents, root, cfg.profiles, cfg.num_classes, audit=audit))
    return patches


def _available(cfg, split, species):
    return sum(len(e) for e, _ in _entries(cfg, split, species))


def check_scenario(cfg, scenario):
    """Fail before training if the configured data cannot support ``scenario``."""
    for sp in scenario.train_species:
        if not _available(cfg, "train", sp):
            raise ConfigError(f"{scenario.name} trains on {sp} patches but no {sp} train entries are configured")
    if not _available(cfg, "test", scenario.test_species):
        raise ConfigError(f"{scenario.name} tests on {scenario.test_species} patches but none are configured")
    val_species = SELECTION_SETS[scenario.criterion]
    if not _available(cfg, "val", val_species):
        raise ConfigError(f"{scenario.name} selects by {scenario.criterion} but no {val_species} val entries are configured")


def tracked_val_species(cfg, scenario):
    """Validation sets followed while training for ``scenario``'s training species.

    Mouse-only training also tracks human validation (when present) so that the
    M2M, M2H_VM and M2H_VH selections can share one run.
    """
    wanted = list(scenario.train_species)
    if scenario.train_species == ("mouse",):
        wanted.append("human")
    wanted.append(SELECTION_SETS[scenario.criterion])
    return [sp for sp in SPECIES if sp in wanted and _available(cfg, "val", sp)]


def _training_fingerprint(cfg, scenario):
    payload = {
        "network": asdict(cfg.network),
        "training": asdict(cfg.training),
        "profiles": {k: asdict(v) for k, v in sorted(cfg.profiles.items())},
        "manifests": [hashlib.sha256(Path(m).read_bytes()).hexdigest() for m in cfg.manifests],
        "train_species": list(scenario.train_species),
        "val_species": tracked_val_species(cfg, scenario),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def train_for_scenario(cfg, scenario, reuse=True, audit=None):
    """Train on the scenario's species (or reuse a matching earlier run). Returns (history, train_dir)."""
    train_dir = Path(cfg.out_dir) / f"train_{scenario.train_key}"
    fingerprint = _training_fingerprint(cfg, scenario)
    stamp = train_dir / "fingerprint.txt"
    class_order = CLASS_NAMES[: cfg.num_classes]
    if reuse and stamp.exists() and stamp.read_text().strip() == fingerprint and (train_dir / "history.tsv").exists():
        logger.info("reusing training run in %s", train_dir)
        return TrainingHistory.read_tsv(train_dir / "history.tsv", class_order), train_dir
    train_set = []
    for sp in scenario.train_species:
        train_set.extend(load_split(cfg, "train", sp, audit=audit))
    val_sets = {sp: load_split(cfg, "val", sp) for sp in tracked_val_species(cfg, scenario)}
    torch.manual_seed(cfg.training.seed)
    model = init_params(cfg.network)
    train_dir.mkdir(parents=True, exist_ok=True)
    stamp.unlink(missing_ok=True)
    history, _ = fit(model, train_set, val_sets, cfg.training, out_dir=train_dir, class_order=class_order)
    stamp.write_text(fingerprint + "\n")
    return history, train_dir


def run_scenario(cfg, name, reuse=True):
    """Train (or reuse), select, evaluate and write the report for one scenario."""
    scenario = get_scenario(name)
    check_scenario(cfg, scenario)
    started = time.time()
    audit = []
    history, train_dir = train_for_scenario(cfg, scenario, reuse=reuse, audit=audit)
    chosen = select_checkpoint(history, scenario.criterion)
    model, meta = load_checkpoint(train_dir / chosen.checkpoint)
    test_set = load_split(cfg, "test", scenario.test_species)
    class_order = CLASS_NAMES[: cfg.num_classes]
    records, _ = evaluate_model(
        model, test_set, cfg.training.threshold, class_order, scenario=scenario.name, method=cfg.method
    )
    out = Path(cfg.out_dir) / scenario.name
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_csv(sort_records(records, class_order), out / "metrics.csv")
    table_path = out / "table.md"
    table_path.write_text(emit_table(records, class_order), encoding="utf-8")
    meta_path = out / "report.json"
    meta_path.write_text(
        json.dumps(
            {
                "scenario": scenario.name,
                "method": cfg.method,
                "config_hash": cfg.config_hash,
                "config_path": str(cfg.path) if cfg.path else None,
                "criterion": scenario.criterion,
                "selection_set": criterion_set(scenario.criterion),
                "selected_epoch": chosen.epoch,
                "checkpoint": str(train_dir / chosen.checkpoint),
                "train_species": list(scenario.train_species),
                "test_species": scenario.test_species,
                "started": started,
                "finished": time.time(),
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return Report(scenario.name, csv_path, table_path, meta_path, records, chosen.epoch, str(train_dir / chosen.checkpoint), audit)


def run_scenarios(cfg, names=None, reuse=True):
    """Run several scenarios, then write a combined ``metrics.csv`` and ``table.md`` in the output dir."""
    names = names or cfg.scenarios or list(SCENARIOS)
    for n in names:
        check_scenario(cfg, get_scenario(n))
    reports = [run_scenario(cfg, n, reuse=reuse) for n in names]
    class_order = CLASS_NAMES[: cfg.num_classes]
    records = [r for rep in reports for r in rep.records]
    write_csv(sort_records(records, class_order), Path(cfg.out_dir) / "metrics.csv")
    (Path(cfg.out_dir) / "table.md").write_text(emit_table(records, class_order), encoding="utf-8")
    return reports


# -- tables -----------------------------------------------------------------

_LOWER_BETTER = {"HD": True, "MSD": True, "Dice": False}


def format_cell(metric, value):
    """One-decimal table text: Dice as a percentage, distances in microns."""
    return f"{100.0 * value:.1f}" if metric == "Dice" else f"{value:.1f}"


def _row_label(scenario, method, multi):
    return f"{method} ({scenario})" if multi and scenario else method


def emit_table(records, class_order=CLASS_NAMES):
    """Markdown table: one row per (scenario, method), Dice/HD/MSD per class and Average.

    In each column the best rounded value is bold (highest Dice, lowest HD and
    MSD); every row tying for best is bold. Absent classes show ``-``.
    """
    if not records:
        raise ValidationError("no records to tabulate")
    records = sort_records(records, class_order)
    rows = []
    for r in records:
        key = (r.scenario, r.method)
        if key not in rows:
            rows.append(key)
    present = {r.class_name for r in records}
    classes = [c for c in class_order if c in present] + ([AVERAGE] if AVERAGE in present else [])
    lookup = {(r.scenario, r.method, r.class_name): r for r in records}
    columns = [(c, m) for c in classes for m in ("Dice", "HD", "MSD")]

    cells = {}
    for (c, m) in columns:
        texts = {}
        for key in rows:
            rec = lookup.get(key + (c,))
            if rec is not None:
                texts[key] = format_cell(m, {"Dice": rec.dice, "HD": rec.hd_um, "MSD": rec.msd_um}[m])
        if texts:
            vals = {k: float(t) for k, t in texts.items()}
            best = min(vals.values()) if _LOWER_BETTER[m] else max(vals.values())
            for k, t in texts.items():
                cells[(k, c, m)] = f"**{t}**" if vals[k] == best else t

    multi = len({s for s, _ in rows}) > 1
    header = ["Method"] + [f"{c} {m}" for c, m in columns]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] + [":-:"] * len(columns)) + "|"]
    for key in rows:
        vals = [cells.get((key, c, m), "-") for c, m in columns]
        lines.append("| " + " | ".join([_row_label(*key, multi)] + vals) + " |")
    return "\n".join(lines) + "\n"


def parse_table(markdown):
    """Inverse of :func:`emit_table` for checking: {(row label, column header): cell text without bold}."""
    lines = [ln for ln in markdown.splitlines() if ln.startswith("|")]
    header = [h.strip() for h in lines[0].strip("|").split("|")]
    out = {}
    for ln in lines[2:]:
        cells = [c.strip() for c in ln.strip("|").split("|")]
        for h, cell in zip(header[1:], cells[1:]):
            out[(cells[0], h)] = re.sub(r"\*\*(.*)\*\*", r"\1", cell)
    return out


def table_matches_records(markdown, records, class_order=CLASS_NAMES):
    """True when every table cell equals the rounded CSV value it came from."""
    cells = parse_table(markdown)
    multi = len({r.scenario for r in records}) > 1
    for r in records:
        label = _row_label(r.scenario, r.method, multi)
        for m, v in (("Dice", r.dice), ("HD", r.hd_um), ("MSD", r.msd_um)):
            if cells.get((label, f"{r.class_name} {m}")) != format_cell(m, v):
                return False
    return True


def report_from_csvs(csv_paths, out_path=None, class_order=CLASS_NAMES):
    records = [r for p in csv_paths for r in read_csv(p)]
    md = emit_table(records, class_order)
    if out_path is not None:
        Path(out_path).write_text(md, encoding="utf-8")
    return md


# -- prediction -------------------------------------------------------------


def predict_file(checkpoint, image_file, class_id, species_profile, out_file, threshold=0.5):
    """Write the thresholded prediction for ``class_id`` as a 0/255 PNG at working size."""
    model, _ = load_checkpoint(checkpoint)
    check_class_id(class_id, model.config.num_classes)
    raw = read_png(image_file)
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=-1)
    if raw.dtype != np.uint8:
        raise DataError(f"image {image_file} must be 8-bit")
    image = resize_image(raw[..., :3], species_profile.working_size).astype(np.float32) / 255.0
    prob = predict_proba(model, image[None], [class_id])[0]
    mask = binarize(prob, threshold)
    write_png(out_file, mask_to_uint8(mask))
    return mask
