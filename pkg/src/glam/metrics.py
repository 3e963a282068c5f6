"""Dice, Hausdorff distance and mean surface distance in microns.

Surfaces are foreground pixels with a 4-neighbour in the background, plus
foreground pixels on the image border. Distances are Euclidean between pixel
centres, scaled by the pixel spacing. When exactly one surface is empty the
distance metrics fall back to the image diagonal in microns.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import CLASS_NAMES
from .exceptions import ValidationError
from .validation import check_mask, check_same_shape, check_spacing

CSV_HEADER = ("scenario", "method", "class", "n", "dice", "hd_um", "msd_um")
AVERAGE = "Average"


def _pair(pred, gt):
    pred = check_mask(pred)
    gt = check_mask(gt)
    check_same_shape(pred, gt, "prediction and ground truth")
    return pred.astype(bool), gt.astype(bool)


def dice(pred, gt):
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def surface_mask(mask):
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def extract_surface(mask):
    """(N, 2) array of (row, col) surface pixel coordinates, row-major order."""
    return np.argwhere(surface_mask(check_mask(mask)))


def _diagonal(shape):
    return math.hypot(*shape)


def _surface_distances(pred, gt):
    """Nearest-surface distances in pixels: (from each pred surface pixel, from each gt surface pixel)."""
    sp, sg = surface_mask(pred), surface_mask(gt)
    if not sp.any() or not sg.any():
        return sp, sg, None, None
    to_g = ndimage.distance_transform_edt(~sg)
    to_p = ndimage.distance_transform_edt(~sp)
    return sp, sg, to_g[sp], to_p[sg]


def _check_spacings(spacing_um, gt_spacing_um):
    spacing = check_spacing(spacing_um)
    if gt_spacing_um is not None and check_spacing(gt_spacing_um) != spacing:
        raise ValidationError(f"spacing mismatch: {spacing_um} vs {gt_spacing_um} um/px")
    return spacing


def hausdorff(pred, gt, spacing_um=1.0, gt_spacing_um=None):
    """Symmetric Hausdorff distance between mask surfaces, in microns."""
    spacing = _check_spacings(spacing_um, gt_spacing_um)
    p, g = _pair(pred, gt)
    sp, sg, d_pg, d_gp = _surface_distances(p, g)
    if d_pg is None:
        return 0.0 if not sp.any() and not sg.any() else _diagonal(p.shape) * spacing
    return float(max(d_pg.max(), d_gp.max())) * spacing


def mean_surface_distance(pred, gt, spacing_um=1.0, gt_spacing_um=None):
    """Mean over both surfaces of the distance to the other surface, in microns."""
    spacing = _check_spacings(spacing_um, gt_spacing_um)
    p, g = _pair(pred, gt)
    sp, sg, d_pg, d_gp = _surface_distances(p, g)
    if d_pg is None:
        return 0.0 if not sp.any() and not sg.any() else _diagonal(p.shape) * spacing
    return float((d_pg.sum() + d_gp.sum()) / (d_pg.size + d_gp.size)) * spacing


def brute_force_surface_metrics(pred, gt, spacing_um=1.0):
    """Reference (hd_um, msd_um) from all pairwise surface-point distances."""
    p, g = _pair(pred, gt)
    a, b = extract_surface(p).astype(float), extract_surface(g).astype(float)
    if len(a) == 0 and len(b) == 0:
        return 0.0, 0.0
    if len(a) == 0 or len(b) == 0:
        d = _diagonal(p.shape) * spacing_um
        return d, d
    diff = a[:, None, :] - b[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    ab, ba = dist.min(axis=1), dist.min(axis=0)
    hd = max(ab.max(), ba.max())
    msd = (ab.sum() + ba.sum()) / (len(ab) + len(ba))
    return float(hd) * spacing_um, float(msd) * spacing_um


# -- records and aggregation ------------------------------------------------


@dataclass
class MetricRecord:
    scenario: str
    method: str
    class_name: str
    dice: float
    hd_um: float
    msd_um: float
    n: int = 1

    def row(self):
        return [self.scenario, self.method, self.class_name, self.n, repr(float(self.dice)), repr(float(self.hd_um)), repr(float(self.msd_um))]


def score_patch(pred, gt, spacing_um):
    return dice(pred, gt), hausdorff(pred, gt, spacing_um), mean_surface_distance(pred, gt, spacing_um)


def aggregate(per_patch, class_order, scenario="", method=""):
    """Per-class arithmetic means plus an Average row over the classes present.

    ``per_patch`` is an iterable of (class_id, dice, hd_um, msd_um). Classes with
    no patches are left out rather than scored as zero.
    """
    by_class = {}
    for class_id, d, hd, msd in per_patch:
        by_class.setdefault(int(class_id), []).append((d, hd, msd))
    records = []
    for class_id in sorted(by_class):
        vals = np.asarray(by_class[class_id], dtype=float)
        records.append(MetricRecord(scenario, method, class_order[class_id - 1], *vals.mean(axis=0), n=len(vals)))
    if records:
        means = np.mean([[r.dice, r.hd_um, r.msd_um] for r in records], axis=0)
        records.append(MetricRecord(scenario, method, AVERAGE, *means, n=sum(r.n for r in records)))
    return records


def evaluate_model(model, patches, threshold=0.5, class_order=None, scenario="", method="GLAM", batch_size=4):
    """Score ``model`` on labelled patches with each patch's own class and spacing.

    Returns (records, per_patch) where ``records`` holds the per-class means and
    a final ``Average`` row (mean of class means).
    """
    from .training import predict_masks

    if not patches:
        raise ValidationError("no test patches to evaluate")
    class_order = class_order or CLASS_NAMES
    preds = predict_masks(model, patches, threshold=threshold, batch_size=batch_size)
    per_patch = [(p.class_id, *score_patch(pred, p.mask, p.spacing_um)) for p, pred in zip(patches, preds)]
    return aggregate(per_patch, class_order, scenario, method), per_patch


def sort_records(records, class_order=CLASS_NAMES):
    """Group by (scenario, method) in order of first appearance, then by class index, Average last."""
    groups = {}
    for r in records:
        groups.setdefault((r.scenario, r.method), len(groups))

    def key(r):
        if r.class_name == AVERAGE:
            idx = len(class_order) + 1
        else:
            idx = class_order.index(r.class_name) if r.class_name in class_order else len(class_order)
        return groups[(r.scenario, r.method)], idx

    return sorted(records, key=key)


def records_to_csv(records, class_order=CLASS_NAMES):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in sort_records(records, class_order):
        writer.writerow(r.row())
    return buf.getvalue()


def write_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(records_to_csv(records))
    return path


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValidationError(f"{path} is not a metric CSV (header {reader.fieldnames})")
        return [
            MetricRecord(r["scenario"], r["method"], r["class"], float(r["dice"]), float(r["hd_um"]), float(r["msd_um"]), int(r["n"]))
            for r in reader
        ]
