"""Standard gradient-verification battery.

Every differentiable operator is checked against central finite differences in
double precision on small seeded inputs; estimator blocks and the end-to-end
registration+loss composition are probed along random directions. Inputs are
arranged to stay away from the non-smooth points of leaky_relu and the
sampling-cell boundaries of warp (displacement fractions bounded away from
integers), where finite differences are meaningless.
"""

from __future__ import annotations

from collections import OrderedDict

import torch

from . import costvolume as cv
from . import diffcore as dc
from . import losses
from . import rrn

DEFAULT_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _rand(shape, seed, lo=-1.0, hi=1.0):
    gen = torch.Generator().manual_seed(seed)
    return torch.empty(shape, dtype=torch.float64).uniform_(lo, hi, generator=gen)


def _rand_away_from_zero(shape, seed, low=0.5, high=1.5):
    gen = torch.Generator().manual_seed(seed)
    mag = torch.empty(shape, dtype=torch.float64).uniform_(low, high, generator=gen)
    sign = torch.empty(shape, dtype=torch.float64).uniform_(-1, 1, generator=gen).sign()
    return mag * sign


def _rand_displacement(dims, seed, low=0.15, high=0.4):
    # fractional parts stay in [low, high], far from sampling-cell boundaries
    return _rand_away_from_zero((3,) + tuple(dims), seed, low, high)


def _structured_displacement(dims):
    # graded field for small grids: fractions stay in (0.1, 0.85) and neighbour
    # differences stay >= 0.006, clear of both warp cell boundaries and the
    # |t| smoothing scale of the regularizer
    z, y, x = torch.meshgrid(*(torch.arange(n, dtype=torch.float64) for n in dims), indexing="ij")
    base = 0.01 * (z + 2.0 * y + 3.0 * x)
    return torch.stack([0.12 + base, 0.15 + 0.8 * base, -(0.18 + 0.6 * base)])


def _perturbed_params(config: rrn.ModelConfig, seed: int, scale: float = 0.05, pred_scale: float = 0.003) -> rrn.ModelParams:
    """Generic parameter point: every tensor perturbed off initialization.
    Displacement-emitting layers get a small perturbation so predicted fields
    stay within a voxel and warps keep sampling inside the grid."""
    params = rrn.init_params(seed, config, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, t in params.tensors.items():
            s = pred_scale if (".pred." in name or name.startswith("final.c6")) else scale
            t.add_(s * torch.randn(t.shape, generator=gen, dtype=torch.float64))
    return params


def run_gradient_suite(include_end_to_end: bool = True) -> list[dc.GradReport]:
    """Run every check; returns one report per operator."""
    reports: list[dc.GradReport] = []
    add = reports.append

    add(dc.gradcheck(lambda x: dc.leaky_relu(x, 0.1), [_rand_away_from_zero((2, 6, 6, 6), 11)], name="leaky_relu/input"))

    w1 = _rand((2, 2, 3, 3, 3), 21, -0.5, 0.5)
    add(
        dc.gradcheck(
            lambda x, w, b: dc.conv3(x, w, b, stride=1),
            [_rand((2, 5, 5, 5), 22), w1, _rand((2,), 23)],
            name="conv3_s1/input+weight+bias",
        )
    )
    add(
        dc.gradcheck(
            lambda x, w, b: dc.conv3(x, w, b, stride=2),
            [_rand((1, 6, 6, 6), 24), _rand((2, 1, 3, 3, 3), 25, -0.5, 0.5), _rand((2,), 26)],
            name="conv3_s2/input+weight+bias",
        )
    )
    add(
        dc.gradcheck(
            lambda x, w, b: dc.conv3(x, w, b, dilation=2),
            [_rand((1, 6, 6, 6), 27), _rand((1, 1, 3, 3, 3), 28, -0.5, 0.5), _rand((1,), 29)],
            name="conv3_dil2/input+weight+bias",
        )
    )

    add(dc.gradcheck(lambda x: dc.upsample2x(x), [_rand((2, 3, 3, 3), 31)], name="upsample2x/input"))
    add(
        dc.gradcheck(
            lambda x: dc.upsample2x(x, scale_values=True),
            [_rand((3, 3, 3, 3), 32)],
            name="upsample2x_scaled/input",
        )
    )

    img = _rand((2, 6, 6, 6), 41)
    disp = _rand_displacement((6, 6, 6), 42)
    add(dc.gradcheck(lambda x, d: dc.warp(x, d), [img, disp], name="warp/image+field"))
    add(dc.gradcheck(lambda x, d: dc.warp(x, d, "border"), [img, disp], name="warp_border/image+field"))

    add(
        dc.gradcheck(
            lambda a, b: dc.concat_channels(a, b),
            [_rand((2, 4, 4, 4), 51), _rand((3, 4, 4, 4), 52)],
            name="concat_channels/inputs",
        )
    )

    add(dc.gradcheck(lambda f: cv.normalize_features(f), [_rand((2, 5, 5, 5), 61)], name="normalize_features/input"))
    add(
        dc.gradcheck(
            lambda f: cv.normalize_features(f, per_channel=True),
            [_rand((2, 5, 5, 5), 62)],
            name="normalize_features_pc/input",
        )
    )
    add(
        dc.gradcheck(
            lambda a, b: cv.correlate(a, b, radius=1, norm="l1").data,
            [_rand((2, 4, 4, 4), 63), _rand((2, 4, 4, 4), 64)],
            name="correlate_l1/inputs",
        )
    )
    add(
        dc.gradcheck(
            lambda a, b: cv.correlate(a, b, radius=1, norm="linf").data,
            [_rand((2, 4, 4, 4), 65), _rand((2, 4, 4, 4), 66)],
            name="correlate_linf/inputs",
        )
    )

    add(
        dc.gradcheck(
            lambda f, w: losses.lcc(f, w, window=3),
            [_rand((6, 6, 6), 71), _rand((6, 6, 6), 72)],
            name="lcc/images",
        )
    )
    add(dc.gradcheck(lambda d: losses.tv(d), [_rand_away_from_zero((3, 4, 4, 4), 73)], name="tv/field"))

    mov_img = _rand((6, 6, 6), 74, 0.0, 1.0)
    fix_img = _rand((6, 6, 6), 75, 0.0, 1.0)
    add(
        dc.gradcheck(
            lambda d: losses.total_loss(fix_img, dc.warp(mov_img, d), d).total,
            [_structured_displacement((6, 6, 6))],
            name="total_loss/field",
        )
    )

    reports.extend(_estimator_checks())
    if include_end_to_end:
        add(_end_to_end_check())
    return reports


def _estimator_checks() -> list[dc.GradReport]:
    config = rrn.ModelConfig(radius=1)
    params = _perturbed_params(config, 101)
    k = config.cost_channels
    dims = (3, 3, 3)
    out: list[dc.GradReport] = []

    def both(pair):
        dvf, ctx = pair
        return torch.cat([dvf, ctx], dim=0)

    out.append(
        dc.gradcheck(
            lambda c, f: both(rrn.estimate_initial(params, c, f)),
            [_rand((k,) + dims, 111), _rand((96,) + dims, 112)],
            name="estimate_initial/inputs",
            mode="directional",
            step=1e-6,
            n_directions=2,
        )
    )
    for level, feat_ch in ((3, 64), (2, 32)):
        out.append(
            dc.gradcheck(
                lambda c, f, d, x, lvl=level: both(rrn.estimate_intermediate(params, lvl, c, f, d, x)),
                [
                    _rand((k,) + dims, 113 + level),
                    _rand((feat_ch,) + dims, 117 + level),
                    _rand((3,) + dims, 121 + level),
                    _rand((32,) + dims, 125 + level),
                ],
                name=f"estimate_intermediate_l{level}/inputs",
                mode="directional",
                step=1e-6,
                n_directions=2,
            )
        )
    out.append(
        dc.gradcheck(
            lambda c, f, d, x: rrn.estimate_final(params, c, f, d, x),
            [
                _rand((k,) + dims, 131),
                _rand((16,) + dims, 132),
                _rand((3,) + dims, 133),
                _rand((32,) + dims, 134),
            ],
            name="estimate_final/inputs",
            mode="directional",
            step=1e-6,
            n_directions=2,
        )
    )
    return out


def _end_to_end_check(seed: int = 202, step: float = 1e-7) -> dc.GradReport:
    """Global gradient check of register + loss on a smooth 16^3 pair.

    Backpropagation must reach every tensor in the manifest; the gradient is
    then verified by central finite differences along its own direction,
    restricted to each architectural block and to the full parameter vector.
    Probing along the gradient keeps the directional derivative large relative
    to the activation-kink noise that defeats random directions.
    """
    config = rrn.ModelConfig(radius=1)
    template = _perturbed_params(config, seed, scale=0.08)
    names = list(template.tensors.keys())
    gen = torch.Generator().manual_seed(seed + 5)
    mov = _smooth_volume((16, 16, 16), gen)
    fix = _smooth_volume((16, 16, 16), gen)

    def fn(tensors: list[torch.Tensor]) -> torch.Tensor:
        params = rrn.ModelParams(OrderedDict(zip(names, tensors)), config)
        out = rrn.register_tensors(params, mov, fix)
        return losses.total_loss(fix, out["warped"], out["dvf_full"], lam=0.01, window=5).total

    leaves = [t.detach().clone().requires_grad_(True) for t in template.tensors.values()]
    loss = fn(leaves)
    grads = torch.autograd.grad(loss, leaves)
    for name, g in zip(names, grads):
        if g is None or not torch.isfinite(g).all() or float(g.abs().max()) == 0.0:
            return dc.GradReport("register+loss_16/params", float("inf"), END_TO_END_TOL, False)

    groups = {"all": names}
    for prefix in ("pyramid", "est4", "est3", "est2", "final"):
        groups[prefix] = [n for n in names if n.startswith(prefix)]

    frozen = [t.detach().clone() for t in leaves]
    max_err = 0.0
    for member_names in groups.values():
        member = set(member_names)
        direction = [g if n in member else torch.zeros_like(g) for n, g in zip(names, grads)]
        norm = torch.sqrt(sum(d.square().sum() for d in direction))
        direction = [d / norm for d in direction]
        analytic = float(sum((g * d).sum() for g, d in zip(grads, direction)))
        with torch.no_grad():
            plus = [t + step * d for t, d in zip(frozen, direction)]
            f_plus = float(fn(plus))
            minus = [t - step * d for t, d in zip(frozen, direction)]
            f_minus = float(fn(minus))
        numeric = (f_plus - f_minus) / (2.0 * step)
        max_err = max(max_err, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-9))
    return dc.GradReport("register+loss_16/params", max_err, END_TO_END_TOL, max_err < END_TO_END_TOL)


def _smooth_volume(dims, gen) -> torch.Tensor:
    noise = torch.randn((1,) + tuple(dims), generator=gen, dtype=torch.float64)
    kernel = torch.ones((1, 1, 3, 3, 3), dtype=torch.float64) / 27.0
    smooth = noise
    for _ in range(2):
        smooth = torch.nn.functional.conv3d(smooth.unsqueeze(0), kernel, padding=1)[0]
    smooth = (smooth - smooth.min()) / (smooth.max() - smooth.min())
    return smooth[0]


def format_reports(reports: list[dc.GradReport]) -> str:
    lines = [f"{'operator':<40s} {'max rel err':>12s}  {'tolerance':>9s}  result"]
    lines += [str(r) for r in reports]
    n_fail = sum(not r.passed for r in reports)
    lines.append(f"{len(reports) - n_fail}/{len(reports)} passed")
    return "\n".join(lines)
