"""Central finite-difference checks for the loss gradient suite.

Every network is built in float64 at 32 px with 4 base channels so a
single loss evaluation costs a few milliseconds.

Two step sizes are used. Losses evaluated directly on their tensor
arguments (scores, probabilities, features, images) are smooth at the
fixtures and are checked with ``STEP``. Slices of network parameters sit
behind ReLU and LeakyReLU units: a 1e-3 perturbation of an early weight
moves thousands of pre-activations and reliably crosses a kink, where the
central difference averages two one-sided slopes. Those cases use
``NET_STEP``, small enough that no kink lies inside the bracket while
float64 round-off stays near 1e-10.
"""

import numpy as np
import torch

from virtualstain.adversaries import build_discriminator, build_sdc
from virtualstain.generator import StainTranslator
from virtualstain.losses import (
    ctpc_from_features,
    pattern_loss_from_probs,
    sdc_loss_from_scores,
    LossWeights,
    charbonnier_loss,
    ctpc_loss,
    cycle_loss,
    disc_loss,
    fod_mask,
    gan_loss,
    gen_loss,
    pattern_loss,
    rec_loss,
    sdc_loss,
)
from virtualstain.networks import GeneratorConfig, PatternClassifier
from virtualstain.stains import STAIN_VECTORS

SIZE = 32
STEP = 1e-3
NET_STEP = 1e-6
TOL = 1e-3
N_SLICE = 16


def fd_relative_error(loss_fn, param, seed=0, n=N_SLICE, h=NET_STEP, state=None):
    """Relative error between autograd and central differences on a random
    ``n``-element slice of ``param``.

    ``state`` optionally returns a hashable summary of any piecewise-constant
    quantity inside the loss (a threshold mask, activation signs). When the
    +-h bracket of an entry changes it, the bracket is shrunk tenfold up to
    twice; entries that still straddle a kink are skipped, since the loss is
    not differentiable across it.
    """
    loss = loss_fn()
    (grad,) = torch.autograd.grad(loss, param)
    grad = grad.reshape(-1)
    flat = param.data.view(-1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(flat.numel())
    analytic, numeric = [], []
    base_state = state() if state else None
    with torch.no_grad():
        for i in order:
            if len(numeric) == n:
                break
            orig = flat[i].item()
            for step in (h, h / 10, h / 100):
                flat[i] = orig + step
                lp, sp = loss_fn().item(), state() if state else None
                flat[i] = orig - step
                lm, sm = loss_fn().item(), state() if state else None
                flat[i] = orig
                if not state or sp == base_state == sm:
                    analytic.append(grad[i].item())
                    numeric.append((lp - lm) / (2 * step))
                    break
    if len(numeric) < n // 2:
        raise AssertionError(f"only {len(numeric)} smooth slice entries")
    a, b = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def kink_state(loss_fn, *modules, extra=None):
    """State function for :func:`fd_relative_error`: runs ``loss_fn`` and
    records which side of every ReLU / LeakyReLU kink each pre-activation
    sits on and which element every max-pool window selects. ``extra``
    adds further piecewise-constant summaries."""
    import torch.nn.functional as F

    def state():
        parts = []

        def relu_hook(_, inputs, __):
            parts.append((inputs[0] > 0).numpy().tobytes())

        def pool_hook(mod, inputs, __):
            _, idx = F.max_pool2d(inputs[0], mod.kernel_size, mod.stride, return_indices=True)
            parts.append(idx.numpy().tobytes())

        handles = []
        for m in modules:
            for sub in m.modules():
                if isinstance(sub, (torch.nn.ReLU, torch.nn.LeakyReLU)):
                    handles.append(sub.register_forward_hook(relu_hook))
                elif isinstance(sub, torch.nn.MaxPool2d):
                    handles.append(sub.register_forward_hook(pool_hook))
        try:
            with torch.no_grad():
                loss_fn()
                if extra is not None:
                    parts.append(extra())
        finally:
            for h in handles:
                h.remove()
        return b"".join(parts)

    return state


def dab_image(seed, n=1, size=SIZE):
    """Model-space IHC-like batch with a blob of DAB stain, float64."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    imgs = []
    for _ in range(n):
        cy, cx = rng.uniform(8, size - 8, 2)
        conc = 1.2 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 30.0)
        conc += 0.05 * rng.random((size, size))
        rgb = 10.0 ** (-conc[..., None] * STAIN_VECTORS["dab"])
        imgs.append(rgb * 2 - 1)
    return torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2).copy())


def rand_image(seed, n=1, size=SIZE):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g, dtype=torch.float64) * 2 - 1


def tiny_nets(seed=0, fal=True):
    cfg = GeneratorConfig(base_channels=4, image_size=SIZE, fal_enabled=fal, seed=seed)
    tr = StainTranslator(cfg).double()
    disc = build_discriminator(4, seed + 1).double()
    sdc = build_sdc(4, seed + 2).double()
    torch.manual_seed(seed + 3)
    clf = PatternClassifier(widths=(4, 8, 8, 8)).double()
    clf.requires_grad_(False)
    return tr, disc, sdc, clf


class Perturbed(torch.nn.Module):
    """A trainable 1x1 colour map applied on top of a fixed image:
    ``gen = base + 0.05 * tanh(conv(base))``."""

    def __init__(self, seed):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.conv = torch.nn.Conv2d(3, 3, 1).double()
        with torch.no_grad():
            self.conv.weight.copy_(torch.randn(3, 3, 1, 1, generator=g, dtype=torch.float64))

    def forward(self, base):
        return torch.clamp(base + 0.05 * torch.tanh(self.conv(base)), -1, 1)


# ------------------------------------------------------------------ cases


def case_gan(variant="least_squares", seed=0):
    _, disc, _, _ = tiny_nets(seed)
    x = rand_image(seed)
    p = next(disc.parameters())
    loss = lambda: gan_loss(disc(x), 1, variant)  # noqa: E731
    return fd_relative_error(loss, p, seed, state=kink_state(loss, disc))


def case_sdc(seed=0):
    _, _, sdc, _ = tiny_nets(seed)
    trg, sim, gen = rand_image(seed), rand_image(seed + 1), rand_image(seed + 2)
    p = next(sdc.parameters())
    loss = lambda: sdc_loss(sdc, trg, sim, gen)  # noqa: E731
    return fd_relative_error(loss, p, seed, state=kink_state(loss, sdc))


def case_cycle(seed=0):
    tr, _, _, _ = tiny_nets(seed)
    src, gen = rand_image(seed), rand_image(seed + 1)
    p = next(tr.reverse.parameters())
    loss = lambda: cycle_loss(src, gen, tr.reverse_generate)  # noqa: E731

    def signs():
        return (src > tr.reverse_generate(gen)).numpy().tobytes()

    return fd_relative_error(loss, p, seed, state=kink_state(loss, tr, extra=signs))


def sharpened(clf, scale=10.0):
    """Untrained classifiers give near-uniform probabilities for every input,
    which makes the pattern gradient vanish; widen the head so probabilities
    differ between images."""
    with torch.no_grad():
        clf.head.weight.mul_(scale)
    return clf


def case_pattern(seed=0):
    clf = sharpened(tiny_nets(seed)[3])
    model = Perturbed(seed)
    trg, base = rand_image(seed), dab_image(seed + 1)
    loss = lambda: pattern_loss(clf, trg, model(base))  # noqa: E731
    return fd_relative_error(loss, model.conv.weight, seed, n=9,
                             state=kink_state(loss, clf, extra=lambda: model(base).abs().lt(1)
                                              .numpy().tobytes()))


def case_ctpc(seed=0):
    clf = sharpened(tiny_nets(seed)[3])
    model = Perturbed(seed)
    trg, base = dab_image(seed, 2), dab_image(seed + 1, 2)
    loss = lambda: ctpc_loss(clf, trg, model(base))  # noqa: E731

    def extra():
        gen = model(base)
        return fod_mask(gen).numpy().tobytes() + gen.abs().lt(1).numpy().tobytes()

    return fd_relative_error(loss, model.conv.weight, seed, n=9,
                             state=kink_state(loss, clf, extra=extra))


def case_charbonnier(seed=0):
    # The curvature of sqrt(d^2 + eps^2) is 1/eps at d = 0, so a step of
    # eps cannot resolve it there; the fixture keeps |x - y| >= 0.1.
    x = rand_image(seed).requires_grad_(True)
    g = torch.Generator().manual_seed(seed + 1)
    d = (0.1 + 0.4 * torch.rand(x.shape, generator=g, dtype=torch.float64))
    sign = torch.where(x.detach() > 0, -1.0, 1.0).to(torch.float64)
    y = x.detach() + sign * d
    return fd_relative_error(lambda: charbonnier_loss(x, y), x, seed, h=STEP)


def case_rec(seed=0):
    tr, disc, _, _ = tiny_nets(seed)
    disc.requires_grad_(False)
    trg = rand_image(seed)
    w = LossWeights()
    loss = lambda: rec_loss(trg, tr.reconstruct, disc, w).total  # noqa: E731
    errs = []
    for p in (next(tr.fal.decoder.parameters()), next(tr.fal.target_encoder.parameters())):
        errs.append(fd_relative_error(loss, p, seed, state=kink_state(loss, tr, disc)))
    return max(errs)


def case_gen(seed=0):
    tr, disc, sdc, clf = tiny_nets(seed)
    clf = sharpened(clf)
    for m in (disc, sdc, tr.fal.decoder):
        m.requires_grad_(False)
    src, sim = rand_image(seed), rand_image(seed + 1)
    trg = dab_image(seed)
    w = LossWeights().with_enabled("sdc", "cyc", "p", "cptc", "l1")

    def loss():
        return gen_loss(src, trg, sim, generate=tr.translate, disc=disc, weights=w, sdc=sdc,
                        reverse=tr.reverse_generate, classifier=clf).total

    def extra():
        gen = tr.translate(src)
        return b"".join(t.numpy().tobytes() for t in (
            fod_mask(gen), gen > trg, src > tr.reverse_generate(gen)))

    state = kink_state(loss, tr, disc, sdc, clf, extra=extra)
    errs = []
    for p in (next(tr.fal.source_encoder.parameters()), next(tr.fal.approximator.parameters()),
              next(tr.reverse.parameters())):
        errs.append(fd_relative_error(loss, p, seed, state=state))
    return max(errs)


def case_disc(seed=0):
    tr, disc, sdc, _ = tiny_nets(seed)
    src, trg, sim = rand_image(seed), rand_image(seed + 1), rand_image(seed + 2)
    with torch.no_grad():
        gen = tr.translate(src)
    w = LossWeights()

    def pair():
        return disc_loss(src, trg, sim, gen=gen, disc=disc, weights=w, sdc=sdc, train_sdc=True)

    ea = fd_relative_error(lambda: pair()[0], next(disc.parameters()), seed,
                           state=kink_state(pair, disc))
    es = fd_relative_error(lambda: pair()[1], next(sdc.parameters()), seed,
                           state=kink_state(pair, sdc))
    return max(ea, es)


# ------------------------------------------- direct-argument cases (STEP)


def _leaf(t):
    return t.clone().requires_grad_(True)


def _randn(seed, *shape):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


class SmoothCritic(torch.nn.Module):
    """Kink-free stand-in for a discriminator: a fixed 4x4 stride-4 conv."""

    def __init__(self, seed, in_ch=3):
        super().__init__()
        self.conv = torch.nn.Conv2d(in_ch, 1, 4, stride=4).double()
        with torch.no_grad():
            self.conv.weight.copy_(0.1 * _randn(seed, 1, in_ch, 4, 4))
            self.conv.bias.zero_()
        self.requires_grad_(False)

    def forward(self, x):
        return self.conv(x)


class SmoothPairCritic(SmoothCritic):
    def __init__(self, seed):
        super().__init__(seed, in_ch=6)

    def forward(self, trg, other):
        return torch.sigmoid(self.conv(torch.cat([trg, other], 1)).mean(dim=(1, 2, 3)))


class SmoothClassifier(torch.nn.Module):
    """Kink-free stand-in for the pattern classifier: tanh conv features at
    1/4 resolution and a linear head, exposing ``features`` and ``head``."""

    def __init__(self, seed, width=8):
        super().__init__()
        self.conv = torch.nn.Conv2d(3, width, 4, stride=4).double()
        self.head = torch.nn.Linear(width, 4).double()
        with torch.no_grad():
            self.conv.weight.copy_(0.3 * _randn(seed, width, 3, 4, 4))
            self.conv.bias.zero_()
            self.head.weight.copy_(_randn(seed + 1, 4, width))
            self.head.bias.zero_()
        self.requires_grad_(False)

    def features(self, x):
        return torch.tanh(self.conv(x))

    def forward(self, x):
        return torch.softmax(self.head(self.features(x).mean(dim=(2, 3))), dim=1)


def direct_gan(seed=0):
    errs = []
    for variant in ("least_squares", "bce"):
        s = _leaf(_randn(seed, 2, 1, 4, 4))
        errs.append(fd_relative_error(lambda: gan_loss(s, 1, variant), s, seed, h=STEP))
    return max(errs)


def direct_sdc(seed=0):
    logits = _leaf(_randn(seed, 2, 4))
    return fd_relative_error(
        lambda: sdc_loss_from_scores(torch.sigmoid(logits[0]), torch.sigmoid(logits[1])),
        logits, seed, h=STEP)


def direct_cycle(seed=0):
    src = rand_image(seed)
    gen = _leaf(rand_image(seed + 1))
    return fd_relative_error(lambda: cycle_loss(src, gen, lambda g: 0.5 * g + 0.1), gen, seed,
                             h=STEP)


def direct_pattern(seed=0):
    p_trg = torch.softmax(_randn(seed, 3, 4), 1)
    logits = _leaf(_randn(seed + 1, 3, 4))
    return fd_relative_error(lambda: pattern_loss_from_probs(p_trg, torch.softmax(logits, 1)),
                             logits, seed, h=STEP)


def direct_ctpc(seed=0):
    f_trg = _randn(seed, 2, 8, 4, 4)
    f_gen = _leaf(_randn(seed + 1, 2, 8, 4, 4))
    g = torch.Generator().manual_seed(seed)
    m_trg = (torch.rand(2, 1, 32, 32, generator=g) < 0.3).double()
    m_gen = (torch.rand(2, 1, 32, 32, generator=g) < 0.3).double()
    return fd_relative_error(lambda: ctpc_from_features(f_trg, f_gen, m_trg, m_gen), f_gen,
                             seed, h=STEP)


def direct_rec(seed=0):
    trg = rand_image(seed)
    rec = _leaf(rand_image(seed + 1))
    w, critic = LossWeights(), SmoothCritic(seed)
    return fd_relative_error(lambda: rec_loss(trg, lambda t: rec, critic, w).total,
                             rec, seed, h=STEP)


def direct_gen(seed=0):
    src, sim = rand_image(seed), rand_image(seed + 1)
    trg = dab_image(seed)
    gen = _leaf(dab_image(seed + 2))
    clf = SmoothClassifier(seed + 2)
    w = LossWeights().with_enabled("sdc", "cyc", "p", "cptc", "l1")
    critic, pair = SmoothCritic(seed), SmoothPairCritic(seed + 1)

    def loss():
        return gen_loss(src, trg, sim, generate=None, gen=gen, disc=critic, weights=w,
                        sdc=pair, reverse=lambda g: 0.5 * g,
                        classifier=clf).total

    def state():
        # the FOD mask and the signs inside both L1 terms are piecewise constant
        with torch.no_grad():
            return b"".join(t.numpy().tobytes() for t in (
                fod_mask(gen), gen > trg, src > 0.5 * gen))

    return fd_relative_error(loss, gen, seed, h=STEP, state=state)


def direct_disc(seed=0):
    src, trg, sim = rand_image(seed), rand_image(seed + 1), rand_image(seed + 2)
    gen = rand_image(seed + 3)
    w = LossWeights()
    critic, pair = SmoothCritic(seed), SmoothPairCritic(seed + 1)
    critic.requires_grad_(True)
    pair.requires_grad_(True)
    ea = fd_relative_error(lambda: disc_loss(src, trg, sim, gen=gen, disc=critic, weights=w,
                                             sdc=pair, train_sdc=True)[0],
                           critic.conv.weight, seed, h=STEP)
    es = fd_relative_error(lambda: disc_loss(src, trg, sim, gen=gen, disc=critic, weights=w,
                                             sdc=pair, train_sdc=True)[1],
                           pair.conv.weight, seed, h=STEP)
    return max(ea, es)


DIRECT_CASES = {
    "gan": direct_gan,
    "sdc": direct_sdc,
    "cycle": direct_cycle,
    "pattern": direct_pattern,
    "ctpc": direct_ctpc,
    "charbonnier": case_charbonnier,
    "rec": direct_rec,
    "gen": direct_gen,
    "disc": direct_disc,
}


CASES = {
    "gan": lambda seed=0: max(case_gan("least_squares", seed), case_gan("bce", seed)),
    "sdc": case_sdc,
    "cycle": case_cycle,
    "pattern": case_pattern,
    "ctpc": case_ctpc,
    "charbonnier": case_charbonnier,
    "rec": case_rec,
    "gen": case_gen,
    "disc": case_disc,
}
