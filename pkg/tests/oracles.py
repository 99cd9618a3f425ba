"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops over plain numpy
scalars/vectors and shares no code with the package's forward paths.
"""

import math

import numpy as np


def loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def params_to_numpy(params):
    return {name: np.array(t.data, copy=True) for name, t in params.named_parameters()}


def _linear(x, w, b):
    out = np.empty(w.shape[1])
    for j in range(w.shape[1]):
        s = b[j]
        for i in range(w.shape[0]):
            s += x[i] * w[i, j]
        out[j] = s
    return out


def _layer_norm(x, g, b, eps):
    n = len(x)
    mu = sum(x) / n
    var = sum((v - mu) ** 2 for v in x) / n
    return np.array([(x[i] - mu) / math.sqrt(var + eps) * g[i] + b[i] for i in range(n)])


def _gelu(v):
    return np.array([0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0))) for x in v])


def _cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def _blk(p, i):
    return {k.split(".", 2)[2]: v for k, v in p.items() if k.startswith(f"blocks.{i}.")}


def _attend(query_row, key_rows, blk, heads):
    """Multi-head attention of one (normalised) row over (normalised) rows, per key."""
    d = len(query_row)
    dh = d // heads
    q = _linear(query_row, blk["wq"], blk["bq"])
    ks = [_linear(r, blk["wk"], blk["bk"]) for r in key_rows]
    vs = [_linear(r, blk["wv"], blk["bv"]) for r in key_rows]
    merged = np.zeros(d)
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        logits = []
        for k in ks:
            logits.append(sum(q[c] * k[c] for c in range(lo, hi)) / math.sqrt(dh))
        top = max(logits)
        ws = [math.exp(l - top) for l in logits]
        z = sum(ws)
        ws = [w / z for w in ws]
        for c in range(lo, hi):
            merged[c] = sum(ws[t] * vs[t][c] for t in range(len(vs)))
    return _linear(merged, blk["wo"], blk["bo"])


def _ffn(x, blk):
    return _linear(_gelu(_linear(x, blk["w1"], blk["b1"])), blk["w2"], blk["b2"])


def oracle_block(rows, blk, heads, eps):
    normed = [_layer_norm(r, blk["ln1_g"], blk["ln1_b"], eps) for r in rows]
    mid = [rows[i] + _attend(normed[i], normed, blk, heads) for i in range(len(rows))]
    return [x + _ffn(_layer_norm(x, blk["ln2_g"], blk["ln2_b"], eps), blk) for x in mid]


def oracle_patches(image, patch):
    c, h, w = image.shape
    rows = []
    for gy in range(h // patch):
        for gx in range(w // patch):
            row = []
            for ch in range(c):
                for py in range(patch):
                    for px in range(patch):
                        row.append(image[ch, gy * patch + py, gx * patch + px])
            rows.append(np.array(row))
    return rows


def oracle_embed(image, p, cfg):
    rows = oracle_patches(image, cfg.patch_size)
    pos = p["pos_embed"]
    cls = p["cls_token"] + pos[0]
    patches = [_linear(r, p["patch_proj.weight"], p["patch_proj.bias"]) + pos[i + 1] for i, r in enumerate(rows)]
    return cls, patches


def oracle_stage1(image, p, cfg):
    """Returns (cls vector, list of M patch vectors) after blocks 0..L-2."""
    cls, patches = oracle_embed(image, p, cfg)
    rows = [cls] + patches
    for i in range(cfg.depth - 1):
        rows = oracle_block(rows, _blk(p, i), cfg.heads, cfg.ln_eps)
    return rows[0], rows[1:]


def oracle_class_attention(cls, patches, blk, cfg):
    rows = [cls] + list(patches)
    normed = [_layer_norm(r, blk["ln1_g"], blk["ln1_b"], cfg.ln_eps) for r in rows]
    x = cls + _attend(normed[0], normed, blk, cfg.heads)
    return x + _ffn(_layer_norm(x, blk["ln2_g"], blk["ln2_b"], cfg.ln_eps), blk)


def oracle_episode_scores(support_images, support_labels, query_images, n_way, p, cfg):
    """Scores (B, N): prototype averaging, patch swap, class attention, summed cosines."""
    last = _blk(p, cfg.depth - 1)
    enc = [oracle_stage1(img, p, cfg) for img in support_images]
    protos = []
    for c in range(n_way):
        members = [enc[k] for k in range(len(enc)) if support_labels[k] == c]
        kk = len(members)
        cls = sum(m[0] for m in members) / kk
        patches = [sum(m[1][r] for m in members) / kk for r in range(len(members[0][1]))]
        protos.append((cls, patches))
    out = []
    for img in query_images:
        q_cls, q_patches = oracle_stage1(img, p, cfg)
        cls_p = [oracle_class_attention(pc, q_patches, last, cfg) for pc, _ in protos]
        cls_q = [oracle_class_attention(q_cls, pp, last, cfg) for _, pp in protos]
        out.append([sum(_cos(cls_q[i], cls_p[j]) for i in range(n_way)) for j in range(n_way)])
    return np.array(out)


def oracle_vanilla_scores(support_images, support_labels, query_images, n_way, p, cfg):
    last = _blk(p, cfg.depth - 1)

    def final(img):
        cls, patches = oracle_stage1(img, p, cfg)
        return oracle_class_attention(cls, patches, last, cfg)

    sup = [final(img) for img in support_images]
    protos = []
    for c in range(n_way):
        members = [sup[k] for k in range(len(sup)) if support_labels[k] == c]
        protos.append(sum(members) / len(members))
    return np.array([[_cos(final(img), pr) for pr in protos] for img in query_images])


def scalar_adamw(theta, grads_seq, lrs, wd, b1, b2, eps):
    """Element-at-a-time AdamW over a sequence of gradients."""
    theta = [float(v) for v in np.ravel(theta)]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for step, (g, lr) in enumerate(zip(grads_seq, lrs), start=1):
        g = np.ravel(g)
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mhat = m[i] / (1 - b1**step)
            vhat = v[i] / (1 - b2**step)
            theta[i] = theta[i] - lr * (mhat / (math.sqrt(vhat) + eps) + wd * theta[i])
    return np.array(theta)


def silhouette(points, labels):
    """Mean silhouette coefficient by brute-force pairwise Euclidean distances."""
    pts = [np.asarray(p, dtype=float) for p in points]
    labels = list(labels)
    n = len(pts)
    dist = [[math.sqrt(sum((a - b) ** 2 for a, b in zip(pts[i], pts[j]))) for j in range(n)] for i in range(n)]
    classes = sorted(set(labels))
    total = 0.0
    for i in range(n):
        own = [dist[i][j] for j in range(n) if j != i and labels[j] == labels[i]]
        if not own:
            continue
        a = sum(own) / len(own)
        b = min(
            sum(dist[i][j] for j in range(n) if labels[j] == c) / labels.count(c)
            for c in classes if c != labels[i]
        )
        total += (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return total / n


def nearest_centroid_accuracy(images, train_per_class):
    """Pixel-space nearest-centroid classifier: fit on the first images of each class, test on the rest."""
    k, n = images.shape[:2]
    flat = images.reshape(k, n, -1).astype(np.float64)
    centroids = flat[:, :train_per_class].mean(axis=1)
    correct = total = 0
    for c in range(k):
        for x in flat[c, train_per_class:]:
            best, best_d = -1, math.inf
            for j in range(k):
                d = float(((x - centroids[j]) ** 2).sum())
                if d < best_d:
                    best, best_d = j, d
            correct += best == c
            total += 1
    return correct / total
