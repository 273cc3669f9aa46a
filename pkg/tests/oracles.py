"""Independent reference implementations used to check the fast paths.

Everything here is written with explicit loops or finite differences and
shares no code with the package besides the Tensor wrapper needed to call
the op under test.
"""

from __future__ import annotations

import numpy as np

from splitunet.tensor import Tensor, backward, sum_all, mul

FD_STEP = 1e-2
FD_RTOL = 1e-3


def conv2d_loops(x, w, b, stride=1):
    B, C, H, W = x.shape
    Cout, Cin, k, _ = w.shape
    pad = k // 2
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = H // stride, W // stride
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(Cin):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[n, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[n, o, i, j] = acc
    return out


def strided_conv2x2_matrix(w, cin, h, wd):
    """Dense matrix of a 2x2, stride-2, unpadded conv mapping (cin, 2h, 2wd) -> (cout, h, wd).

    ``w`` is indexed (cout, cin, 2, 2).
    """
    cout = w.shape[0]
    A = np.zeros((cout * h * wd, cin * 2 * h * 2 * wd))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                row = (o * h + i) * wd + j
                for c in range(cin):
                    for di in range(2):
                        for dj in range(2):
                            col = (c * 2 * h + 2 * i + di) * 2 * wd + 2 * j + dj
                            A[row, col] += w[o, c, di, dj]
    return A


def tv_loops(img):
    B, C, H, W = img.shape
    total = 0.0
    for b in range(B):
        for c in range(C):
            for h in range(H):
                for w in range(W):
                    if h + 1 < H:
                        total += abs(float(img[b, c, h + 1, w]) - float(img[b, c, h, w]))
                    if w + 1 < W:
                        total += abs(float(img[b, c, h, w + 1]) - float(img[b, c, h, w]))
    return total / (B * C * H * W)


def ssim_loops(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """SSIM of two 2-D images by explicit window sums at every valid position."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    r = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-r ** 2 / (2 * sigma ** 2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    H, W = a.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def rel_err(analytic, numeric):
    """Max-norm relative error ||a - n||_inf / ||n||_inf."""
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def fd_gradients(fn, arrays, step=FD_STEP, seed=0):
    """Check ``fn`` (Tensors -> Tensor) against central finite differences.

    The scalar probe is sum(w * fn(...)) with fixed random weights w.  Both
    the analytic and numeric gradients are evaluated in float64.  Returns
    one relative error per input.
    """
    arrays = [np.asarray(a, np.float64) for a in arrays]
    probe_rng = np.random.default_rng(seed)
    out0 = fn(*[Tensor(a) for a in arrays])
    w = probe_rng.standard_normal(out0.shape)

    def scalar(arrs):
        return float(np.sum(fn(*[Tensor(a) for a in arrs]).data.astype(np.float64) * w))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    backward([sum_all(mul(out, Tensor(w.astype(out.dtype))))], inputs=leaves)

    errors = []
    for idx, a in enumerate(arrays):
        num = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            mi = it.multi_index
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[idx][mi] += step
            minus[idx][mi] -= step
            num[mi] = (scalar(plus) - scalar(minus)) / (2 * step)
        errors.append(rel_err(leaves[idx].grad, num))
    return errors


# ---------------------------------------------------------------------------
# split-learning protocol vs. one monolithic graph


def wire(k, data, seed=0, variant=None, guard=None, lr=1e-3):
    """K sites and a coordinator over a fresh mailbox."""
    from splitunet.model import ArchSpec, SplitConfig, Variant, build_split
    from splitunet.slproto import COORDINATOR, Coordinator, Mailbox, ShareGuard, Site, site_name

    variant = Variant.ALL_SKIPS if variant is None else variant
    guard = ShareGuard() if guard is None else guard
    encoders, dec = build_split(ArchSpec(), SplitConfig(k, 0, variant), seed)
    net = Mailbox([COORDINATOR] + [site_name(i) for i in range(k)])
    sites = [Site(i, e, data.modality(i), net, variant, guard, seed, lr) for i, e in enumerate(encoders)]
    coord = Coordinator(dec, data.labels, k, net, variant, lr)
    return encoders, dec, sites, coord


def monolithic_grads(encoders, dec, data, indices, aug_seed, variant=None):
    """Loss and parameter gradients from a single end-to-end graph."""
    from splitunet.model import Variant, decoder_forward, encoder_forward
    from splitunet.nn import dice_ce_loss
    from splitunet.slproto import augment, flip_mask

    variant = Variant.ALL_SKIPS if variant is None else variant
    idx = np.asarray(indices)
    flips = flip_mask(aug_seed, len(idx))
    bundles = [encoder_forward(e, Tensor(augment(data.modality(k)[idx], flips)[:, None]), variant)
               for k, e in enumerate(encoders)]
    loss = dice_ce_loss(decoder_forward(dec, bundles, variant), augment(data.labels[idx], flips))
    params = [p for e in encoders for p in e.parameters()] + dec.parameters()
    backward([loss], inputs=params)
    return loss.item(), [p.grad for p in params]


def max_rel(got, ref):
    """Largest per-tensor max-norm relative error."""
    return max(rel_err(a, b) for a, b in zip(got, ref))
