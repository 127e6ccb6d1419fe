"""Independent brute-force reference implementations used by the test suite."""
import numpy as np


def auroc_pairwise(scores, is_ood):
    scores = np.asarray(scores, dtype=float)
    is_ood = np.asarray(is_ood, dtype=bool)
    ind, ood = scores[~is_ood], scores[is_ood]
    total = 0.0
    for a in ind:
        for b in ood:
            if a > b:
                total += 1.0
            elif a == b:
                total += 0.5
    return total / (len(ind) * len(ood))


def fpr_threshold_sweep(scores, is_ood, recall=0.9):
    scores = np.asarray(scores, dtype=float)
    is_ood = np.asarray(is_ood, dtype=bool)
    ind, ood = scores[~is_ood], scores[is_ood]
    best = None
    for t in np.unique(scores):
        if np.sum(ind >= t) / len(ind) >= recall and (best is None or t > best):
            best = t
    return float(np.sum(ood >= best) / len(ood))


def mahalanobis_dense(train_x, train_y, test_x):
    """Fit + score through an explicit matrix inverse; returns (means, cov, ridge, scores)."""
    train_x = np.asarray(train_x, dtype=float)
    test_x = np.atleast_2d(np.asarray(test_x, dtype=float))
    classes = sorted(set(int(c) for c in train_y))
    means = np.array([train_x[np.asarray(train_y) == c].mean(axis=0) for c in classes])
    d = train_x.shape[1]
    cov = np.zeros((d, d))
    for x, c in zip(train_x, train_y):
        diff = (x - means[int(c)])[:, None]
        cov += diff @ diff.T
    cov /= len(train_x)
    tr = np.trace(cov) / d
    ridge = 1e-6 * (tr if tr > 0 else 1.0)
    prec = np.linalg.inv(cov + ridge * np.eye(d))
    scores = []
    for x in test_x:
        scores.append(-min((x - m) @ prec @ (x - m) for m in means))
    return means, cov, ridge, np.array(scores)


def importance_triple_loop(sequences, attentions, weights, reserved=(0, 1, 2)):
    """I(v) = (1/n_v) * sum over examples, positions of 1[v_i = v] * a_i * w(x)."""
    vocab = sorted({t for s in sequences for t in s if t not in reserved})
    result = {}
    for v in vocab:
        num, n_v = 0.0, 0
        for s, a, w in zip(sequences, attentions, weights):
            inner = 0.0
            for i in range(len(s)):
                if s[i] == v:
                    inner += a[i]
                    n_v += 1
            num += inner * w
        result[v] = num / n_v
    return result


def finite_difference_check(model, loss_fn, n_samples, seed=0, step=1e-5, floor=1e-9):
    """Compare autograd against central differences on randomly sampled scalar parameters.

    Returns an array of relative errors |a - n| / max(|a|, |n|). Entries where both
    derivatives are below `floor` are NaN: the gradient there is zero up to roundoff
    (key biases, for one, cancel inside the softmax) and a ratio would be noise.
    """
    import torch

    params = [p for p in model.parameters()]
    model.zero_grad()
    loss_fn().backward()
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(offsets[-1], size=n_samples, replace=False)
    errors = []
    for k in flat_idx:
        which = int(np.searchsorted(offsets, k, side="right") - 1)
        p, j = params[which], int(k - offsets[which])
        analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[j])
        flat = p.data.view(-1)
        orig = float(flat[j])
        with torch.no_grad():
            flat[j] = orig + step
            up = float(loss_fn())
            flat[j] = orig - step
            down = float(loss_fn())
            flat[j] = orig
        numeric = (up - down) / (2 * step)
        denom = max(abs(analytic), abs(numeric))
        errors.append(np.nan if denom < floor else abs(analytic - numeric) / denom)
    return np.array(errors)
