#!/usr/bin/env python3
"""Generate the synthetic evaluation fixture and its golden metrics.

The golden numbers come from a direct implementation: greedy matching by
descending confidence with an explicit scan over every ground-truth box,
and 101-point AP taken as the best precision among all sweep points with
recall at or above each sample. Run from this directory.
"""
import os
import random

CLASSES = ["metal", "circuit_board", "plastic"]
THRESHOLDS = [0.50 + 0.05 * i for i in range(10)]
rng = random.Random(20240607)


def iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def r6(v):
    return float(f"{v:.6f}")


def make_images(n_images):
    images = {}
    dets = []
    confs = set()

    def conf():
        while True:
            c = round(rng.uniform(0.05, 0.99), 4)
            if c not in confs:
                confs.add(c)
                return c

    for i in range(n_images):
        stem = f"img_{i:03d}"
        gts = []
        for _ in range(rng.randint(2, 7)):
            w, h = r6(rng.uniform(0.05, 0.15)), r6(rng.uniform(0.05, 0.15))
            x, y = r6(rng.uniform(0.1, 0.9)), r6(rng.uniform(0.1, 0.9))
            if any(iou((x, y, w, h), g[1:]) > 0 for g in gts):
                continue
            gts.append((rng.randrange(3), x, y, w, h))
        images[stem] = gts
        for c, x, y, w, h in gts:
            if rng.random() < 0.12:
                continue  # missed
            pc = c if rng.random() > 0.15 else rng.randrange(3)
            dx, dy = rng.gauss(0, 0.25) * w, rng.gauss(0, 0.25) * h
            sw, sh = 1 + rng.gauss(0, 0.15), 1 + rng.gauss(0, 0.15)
            box = (r6(x + dx), r6(y + dy), r6(max(0.01, w * sw)), r6(max(0.01, h * sh)))
            if not (0 < box[0] < 1 and 0 < box[1] < 1):
                continue
            dets.append((stem, pc, *box, conf()))
            if rng.random() < 0.1:  # duplicate
                dets.append((stem, pc, r6(box[0] + 0.005), box[1], box[2], box[3], conf()))
        for _ in range(rng.randint(0, 2)):  # spurious
            dets.append((stem, rng.randrange(3), r6(rng.uniform(0.1, 0.9)), r6(rng.uniform(0.1, 0.9)),
                         r6(rng.uniform(0.03, 0.1)), r6(rng.uniform(0.03, 0.1)), conf()))
    dets.append(("img_999", 0, 0.5, 0.5, 0.1, 0.1, conf()))  # image without annotations
    return images, dets


def near_threshold(images, dets):
    for d in dets:
        for g in images.get(d[0], []):
            v = iou(d[2:6], g[1:])
            if any(abs(v - t) < 1e-6 for t in THRESHOLDS):
                return True
    return False


def match(images, dets, thr, aware):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][6], i))
    taken = {}
    tp = [False] * len(dets)
    pairs = []
    for di in order:
        d = dets[di]
        best, best_v = None, -1.0
        for gi, g in enumerate(images.get(d[0], [])):
            if (d[0], gi) in taken or (aware and g[0] != d[1]):
                continue
            v = iou(d[2:6], g[1:])
            if v > best_v:
                best, best_v = gi, v
        if best is not None and best_v >= thr:
            taken[(d[0], best)] = di
            tp[di] = True
    return tp, taken


def ap_for(images, dets, tp, cls):
    n_gt = sum(1 for gts in images.values() for g in gts if g[0] == cls)
    if n_gt == 0:
        return None, 0, 0
    idx = sorted([i for i, d in enumerate(dets) if d[1] == cls], key=lambda i: -dets[i][6])
    pts = []
    t = 0
    for k, i in enumerate(idx, 1):
        t += tp[i]
        pts.append((t / n_gt, t / k))
    total = 0.0
    for s in range(101):
        r = s / 100
        total += max([p for rc, p in pts if rc >= r], default=0.0)
    return total / 101, t, len(idx)


def main():
    while True:
        images, dets = make_images(24)
        if not near_threshold(images, dets):
            break
    os.makedirs("annotations", exist_ok=True)
    for stem, gts in images.items():
        with open(f"annotations/{stem}.txt", "w") as f:
            for g in gts:
                f.write(f"{g[0]} {g[1]:.6f} {g[2]:.6f} {g[3]:.6f} {g[4]:.6f}\n")
    with open("detections.csv", "w") as f:
        f.write("frame_id,class,x_c,y_c,w,h,confidence\n")
        for d in dets:
            f.write(f"{d[0]},{CLASSES[d[1]]},{d[2]:.6f},{d[3]:.6f},{d[4]:.6f},{d[5]:.6f},{d[6]:.4f}\n")

    rows = []
    tp50, _ = match(images, dets, 0.5, True)
    aps50 = []
    for c in range(3):
        ap, t, n_det = ap_for(images, dets, tp50, c)
        n_gt = sum(1 for gts in images.values() for g in gts if g[0] == c)
        prec = t / n_det if n_det else 0.0
        rec = t / n_gt if n_gt else 0.0
        aps50.append(ap)
        rows.append((CLASSES[c], prec, rec, ap, n_gt, n_det))
    maps = []
    for thr in THRESHOLDS:
        tp, _ = match(images, dets, thr, True)
        aps = [ap_for(images, dets, tp, c)[0] for c in range(3)]
        aps = [a for a in aps if a is not None]
        maps.append(sum(aps) / len(aps))
    _, taken = match(images, dets, 0.5, False)
    confusion = [[0] * 4 for _ in range(3)]
    for stem, gts in images.items():
        for gi, g in enumerate(gts):
            di = taken.get((stem, gi))
            confusion[g[0]][3 if di is None else dets[di][1]] += 1

    with open("golden.csv", "w") as f:
        f.write("key,value\n")
        for name, p, r, ap, n_gt, n_det in rows:
            f.write(f"{name}.precision,{p:.12f}\n{name}.recall,{r:.12f}\n{name}.ap50,{ap:.12f}\n")
            f.write(f"{name}.gt,{n_gt}\n{name}.det,{n_det}\n")
        f.write(f"map50,{sum(aps50) / 3:.12f}\n")
        f.write(f"map50_95,{sum(maps) / len(maps):.12f}\n")
        for c in range(3):
            for j, col in enumerate(CLASSES + ["miss"]):
                f.write(f"confusion.{CLASSES[c]}.{col},{confusion[c][j]}\n")


if __name__ == "__main__":
    main()
