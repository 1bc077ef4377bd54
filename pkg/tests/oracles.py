"""Independent brute-force references used by the tests.

Nothing here imports the package under test; every routine is a direct
per-pixel / per-element transcription of a definition.
"""

import math
from collections import deque

import numpy as np


def boundary_by_window(mask, thickness):
    """Pixel is boundary iff its Chebyshev ball of radius ceil(t/2), clipped to
    the image, holds two differing class ids (one of which is then nonzero)."""
    r = math.ceil(thickness / 2)
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            window = mask[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1]
            values = set(window.ravel().tolist())
            if len(values) >= 2:
                out[y, x] = 1
    return out


def flood_fill_components(mask, class_id):
    """8-connected components via breadth-first search; list of pixel sets."""
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] != class_id or seen[y, x]:
                continue
            comp, queue = set(), deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                comp.add((cy, cx))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and not seen[ny, nx] \
                                and mask[ny, nx] == class_id:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            comps.append(comp)
    return comps


def bilinear_sample(img, oy, ox, out_h, out_w):
    """Half-pixel-centred bilinear resampling evaluated one output pixel at a time."""
    h, w = img.shape
    sy, sx = h / out_h, w / out_w
    y = max((oy + 0.5) * sy - 0.5, 0.0)
    x = max((ox + 0.5) * sx - 0.5, 0.0)
    y0, x0 = min(int(math.floor(y)), h - 1), min(int(math.floor(x)), w - 1)
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def pixel_counts(pred, gt, class_id):
    tp = fp = tn = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p == class_id and g == class_id:
            tp += 1
        elif p == class_id:
            fp += 1
        elif g == class_id:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def metrics_by_enumeration(pairs):
    """(iou_things, iou_stuff, mIoU, Acc, MAE, mBER, counts) with the harness's
    definitions, recomputed pixel by pixel in pure Python."""
    totals = {c: [0, 0, 0, 0] for c in (1, 2)}
    mae_terms, acc_terms = [], []
    for pred, gt in pairs:
        for c in (1, 2):
            for i, v in enumerate(pixel_counts(pred, gt, c)):
                totals[c][i] += v
        p, g = pred.ravel().tolist(), gt.ravel().tolist()
        mae_terms.append(sum((a > 0) != (b > 0) for a, b in zip(p, g)) / len(g))
        fg = [(a, b) for a, b in zip(p, g) if b > 0]
        acc_terms.append(1.0 if not fg else sum(a == b for a, b in fg) / len(fg))

    def ratio(n, d):
        return 1.0 if d == 0 else n / d

    ious, bers = [], []
    for c in (1, 2):
        tp, fp, tn, fn = totals[c]
        ious.append(100 * ratio(tp, tp + fp + fn))
        bers.append(100 * (1 - 0.5 * (ratio(tp, tp + fn) + ratio(tn, tn + fp))))
    n = len(pairs)
    return {
        "iou_things": ious[0], "iou_stuff": ious[1], "miou": (ious[0] + ious[1]) / 2,
        "acc": 100 * math.fsum(acc_terms) / n, "mae": math.fsum(mae_terms) / n,
        "ber_things": bers[0], "ber_stuff": bers[1], "mber": (bers[0] + bers[1]) / 2,
        "counts": totals,
    }


def dice_loss_scalar(s, g, eps):
    s, g = np.asarray(s, dtype=np.float64).ravel(), np.asarray(g, dtype=np.float64).ravel()
    num = 2 * sum(a * b for a, b in zip(s, g)) + eps
    den = sum(a * a for a in s) + sum(b * b for b in g) + eps
    return 1 - num / den
