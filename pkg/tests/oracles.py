"""Independent reference implementations used as test oracles.

Everything in here is deliberately brute-force and written against the math
directly, so it never shares code with the library paths it checks.
"""

import numpy as np


def central_difference(f, x, eps=1e-5):
    """Gradient of scalar f at array x via central differences, one entry at
    a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def max_rel_err(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + floor)))


def triplet_brute_force(embeddings, labels, centers, initialized, margin):
    """Margin loss against class centers, straight from the definition:
    sum_i sum_{l != y_i, initialized} max(d(x_i, c_{y_i}) + margin - d(x_i, c_l), 0).
    """
    total = 0.0
    for i, y in enumerate(labels):
        d_pos = np.linalg.norm(embeddings[i] - centers[y])
        for l in range(centers.shape[0]):
            if l == y or not initialized[l]:
                continue
            d_neg = np.linalg.norm(embeddings[i] - centers[l])
            total += max(d_pos + margin - d_neg, 0.0)
    return total


def threshold_search_brute_force(distances, same):
    """Best accuracy threshold by exhaustive sweep over midpoints of the
    sorted distances (plus sentinels below/above). Ties -> smallest threshold.
    Decision rule: same iff distance <= threshold."""
    distances = np.asarray(distances, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    d = np.sort(np.unique(distances))
    candidates = [d[0] - 1.0]
    for a, b in zip(d[:-1], d[1:]):
        candidates.append((a + b) / 2.0)
    candidates.append(d[-1] + 1.0)
    best_t, best_acc = None, -1.0
    for t in candidates:
        acc = float(np.mean((distances <= t) == same))
        if acc > best_acc:
            best_acc, best_t = acc, t
    return best_t, best_acc


def nearest_prototype_accuracy(images, labels):
    """Classify each image by the nearest per-class mean image (Euclidean)."""
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    protos = np.stack([images[labels == c].mean(axis=0) for c in classes])
    correct = 0
    for img, lab in zip(images, labels):
        d = np.linalg.norm(protos - img[None, :], axis=1)
        if classes[int(np.argmin(d))] == lab:
            correct += 1
    return correct / len(labels)


def softmax_rows_reference(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_reference(logits, labels):
    """Sum over the batch of -log p[true]; stable log-sum-exp form."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float(np.sum(lse - shifted[np.arange(len(labels)), labels]))
