"""Command-line interface: ``uncreg <command> [<subcommand>] [options]``.

File conventions:

* MeanStdField: UAF1, 7 float32 channels (mean x3, std x3, mask).
* Transform fields / truth: UAF1, 3 float32 channels on the subject grid,
  zero outside the mask. Sample stacks hold 3*S channels.
* Masks: UAF1 uint8; label volumes: UAF1 uint16.
* Parametric posteriors: UTP1. Demons posteriors: ``PREFIX.mean.uaf``,
  ``PREFIX.var.uaf``, ``PREFIX.meta.txt``.

Scalar reports are printed as ``name<TAB>value`` with 9 significant digits.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import basis, demons, downstream, metrics, synth, volume_io, wls
from ._parallel import set_threads
from .grid import LabelVolume, Mask, MeanStdField

DEFAULT_SAMPLES = 50
THREADS_ENV = "UNCREG_THREADS"


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError(f"file not found: {p}")
    return p


def load_field(path) -> MeanStdField:
    obj = volume_io.read_raw_field(_require(path))
    if not isinstance(obj, MeanStdField):
        raise CLIError(f"{path}: not a mean/std field (expected 7 float32 channels)")
    return obj


def load_mask(path) -> Mask:
    obj = volume_io.read_raw_field(_require(path))
    if isinstance(obj, MeanStdField):
        return obj.mask
    if not isinstance(obj, Mask):
        raise CLIError(f"{path}: not a mask")
    return obj


def load_labels(path) -> LabelVolume:
    obj = volume_io.read_raw_field(_require(path))
    if not isinstance(obj, LabelVolume):
        raise CLIError(f"{path}: not a label volume")
    return obj


def load_vectors(path) -> volume_io.RawVolume:
    vol = volume_io.read_uaf(_require(path))
    if vol.dtype_code != volume_io.FLOAT32 or vol.channels % 3:
        raise CLIError(f"{path}: expected a multiple of 3 float32 channels")
    return vol


def write_vectors(path, mask: Mask, fields) -> None:
    """Write (S, 3, M) masked fields as a 3*S channel grid volume."""
    fields = np.asarray(fields, dtype=float).reshape(-1, mask.count)
    vol = mask.scatter(fields, fill=0.0)
    volume_io.write_uaf(path, mask.grid, vol, vol.shape[0], volume_io.FLOAT32)


def report(rows, out=None) -> None:
    text = "".join(f"{name}\t{value:.9g}\n" for name, value in rows)
    sys.stdout.write(text)
    if out:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth_gen(a):
    aff = np.asarray(a.affine, dtype=float).reshape(3, 4) if a.affine else np.hstack([np.eye(3), np.zeros((3, 1))])
    bumps = tuple(synth.Bump(tuple(b[0:3]), b[3], tuple(b[4:7])) for b in (a.bump or []))
    spec = synth.SynthSpec(
        dims=tuple(a.dims),
        spacing=tuple(a.spacing),
        affine=tuple(map(tuple, aff)),
        bumps=bumps,
        noise=synth.NoiseSpec(a.noise, a.sigma_min, a.sigma_max, a.shell_fraction, a.shell_width),
        mask_radius_mm=a.radius,
        atlas_pattern=a.atlas,
        n_labels=a.labels,
        miscalibration=a.miscalibration,
        seed=a.seed,
    )
    d = synth.generate(spec)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    volume_io.write_uaf(out / "truth.uaf", spec.grid, d.truth, 3)
    volume_io.write_raw_field(out / "field.uaf", d.field)
    volume_io.write_raw_field(out / "mask.uaf", d.mask)
    volume_io.write_raw_field(out / "subject_seg.uaf", d.subject_seg)
    volume_io.write_raw_field(out / "atlas_seg.uaf", d.atlas_seg)
    if a.nifti:
        volume_io.write_nifti(out / "truth.nii", spec.grid, d.truth, 3, np.float32)
        volume_io.write_nifti(out / "field_mean.nii", spec.grid, d.field.mean, 3, np.float32)
        volume_io.write_nifti(out / "field_std.nii", spec.grid, d.field.std, 3, np.float32)
        volume_io.write_nifti(out / "mask.nii", spec.grid, d.mask.values.astype(np.uint8), 1, np.uint8)
        volume_io.write_nifti(out / "subject_seg.nii", spec.grid, d.subject_seg.labels, 1, np.int16)
        volume_io.write_nifti(out / "atlas_seg.nii", spec.grid, d.atlas_seg.labels, 1, np.int16)
    lines = [
        f"dims = {' '.join(map(str, spec.dims))}",
        f"spacing = {' '.join(map(repr, spec.spacing))}",
        f"origin = {' '.join(map(repr, spec.grid.origin))}",
        f"affine = {' '.join(repr(float(v)) for v in aff.ravel())}",
        *(f"bump = {' '.join(repr(float(v)) for v in b)}" for b in (a.bump or [])),
        f"noise = {a.noise}",
        f"sigma_min = {a.sigma_min!r}",
        f"sigma_max = {a.sigma_max!r}",
        f"shell_fraction = {a.shell_fraction!r}",
        f"shell_width = {a.shell_width!r}",
        f"radius = {spec.radius!r}",
        f"atlas = {a.atlas}",
        f"labels = {a.labels}",
        f"miscalibration = {a.miscalibration!r}",
        f"seed = {a.seed}",
        f"masked_voxels = {d.mask.count}",
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _fit_and_save(a, field, phi):
    p = wls.fit(field, phi, a.epsilon, a.weighted)
    wls.save_posterior(a.out, p)
    if a.field_out:
        write_vectors(a.field_out, field.mask, wls.most_likely_field(p, phi)[None])
    if len(p.pruned):
        print(f"# pruned {len(p.pruned)} unconstrained columns", file=sys.stderr)
    return p


def cmd_fit_affine(a):
    field = load_field(a.field)
    _fit_and_save(a, field, basis.affine_basis(field.grid, field.mask))


def cmd_fit_bspline(a):
    field = load_field(a.field)
    phi, _ = basis.bspline_basis(field.grid, field.mask, a.spacing, a.max_columns)
    _fit_and_save(a, field, phi)


def cmd_fit_joint(a):
    field = load_field(a.field)
    phi_bs, _ = basis.bspline_basis(field.grid, field.mask, a.spacing, a.max_columns)
    phi = basis.joint_basis([basis.affine_basis(field.grid, field.mask), phi_bs])
    _fit_and_save(a, field, phi)


def cmd_fit_sequential(a):
    field = load_field(a.field)
    phis = [
        basis.affine_basis(field.grid, field.mask),
        basis.bspline_basis(field.grid, field.mask, a.spacing, a.max_columns)[0],
    ]
    posts = wls.sequential_fit_designs(field, phis, a.epsilon, a.weighted)
    wls.save_posterior(a.out_affine, posts[0])
    wls.save_posterior(a.out_bspline, posts[1])
    if a.field_out:
        write_vectors(a.field_out, field.mask, wls.composed_field(posts, phis)[None])


def _kernel(a) -> demons.SmoothingKernel:
    return demons.SmoothingKernel(a.sigma, a.truncation)


def cmd_fit_demons(a):
    field = load_field(a.field)
    post = demons.demons_fit(field, _kernel(a), a.mode, a.paper_variance)
    demons.save_nonparam(a.out, post)


def _design_for(p: wls.TransformPosterior, field: MeanStdField) -> basis.DesignMatrix:
    return basis.design_from_spec(p.basis_spec, field.grid, field.mask)


def cmd_sample(a):
    field = load_field(a.field)
    if bool(a.posterior) == bool(a.demons):
        raise CLIError("give exactly one of --posterior or --demons")
    if a.posterior:
        p = wls.load_posterior(_require(a.posterior))
        phi = _design_for(p, field)
        samples = wls.sample_fields(p, phi, field, a.n, a.seed, literal_paper_noise=a.literal_paper_noise)
        write_vectors(a.out, field.mask, samples)
    else:
        post = demons.load_nonparam(a.demons)
        samples = demons.demons_sample(
            field, post.kernel, post.mode, a.n, a.seed, literal_paper_noise=a.literal_paper_noise
        )
        volume_io.write_uaf(a.out, field.grid, samples.reshape((-1,) + field.grid.dims), 3 * a.n)


def cmd_variance(a):
    p = wls.load_posterior(_require(a.posterior))
    var = wls.coefficient_variance(p)
    if p.basis_spec.get("kind") == "bspline":
        lattice = basis.BSplineLattice.from_dict(p.basis_spec["lattice"])
        from .grid import unflatten_x_fastest

        vol = unflatten_x_fastest(var, lattice.dims)
        volume_io.write_uaf(a.out, lattice.as_grid(), vol, 3, volume_io.FLOAT32)
    else:
        rows = [f"direction\tcolumn\tvariance\n"]
        rows += [f"{j}\t{b}\t{var[j, b]:.9g}\n" for j in range(3) for b in range(p.n_cols)]
        Path(a.out).write_text("".join(rows))


def cmd_modes(a):
    field = load_field(a.field)
    p = wls.load_posterior(_require(a.posterior))
    phi = _design_for(p, field)
    bundle = wls.leading_modes(p, a.k, a.oversample, a.seed, a.power_iters)
    rows = [(f"lambda_{j + 1}_{i + 1}", bundle.eigenvalues[j, i]) for j in range(3) for i in range(a.k)]
    report(rows, a.eigen_out)
    if a.out:
        fields = [
            wls.mode_displacement(p, phi, bundle, a.mode_index - 1, s, a.sqrt_eigenvalue, (a.scale_min, a.scale_max))
            for s in a.scales
        ]
        write_vectors(a.out, field.mask, fields)


def _transform_channels(vol: volume_io.RawVolume, mask: Mask, index: int) -> np.ndarray:
    mask.grid.check_same(vol.grid, "transform")
    n = vol.channels // 3
    if not 0 <= index < n:
        raise CLIError(f"sample index {index} out of range for {n} fields")
    return mask.gather(vol.data[3 * index:3 * index + 3].astype(float))


def cmd_warp_labels(a):
    mask = load_mask(a.mask)
    atlas = load_labels(a.atlas)
    field = _transform_channels(load_vectors(a.transform), mask, a.index)
    volume_io.write_raw_field(a.out, downstream.warp_labels(field, atlas, mask))


def cmd_entropy(a):
    mask = load_mask(a.mask)
    atlas = load_labels(a.atlas)
    vol = load_vectors(a.samples)
    samples = [_transform_channels(vol, mask, s) for s in range(vol.channels // 3)]
    dist = downstream.ensemble_labels(samples, atlas, mask)
    h = downstream.entropy_map(dist)
    volume_io.write_uaf(a.out, h.grid, h.values, 1, volume_io.FLOAT32)
    if a.dist_out:
        downstream.save_distribution(a.dist_out, dist)
    if a.vote_out:
        volume_io.write_raw_field(a.vote_out, downstream.majority_vote(dist))


def cmd_metrics_dice(a):
    res = metrics.dice_score(load_labels(a.a), load_labels(a.b), a.labels)
    rows = [(f"dice_{lab}", v) for lab, v in sorted(res.per_label.items())]
    rows.append(("dice_mean", res.mean))
    report(rows, a.out)
    for lab in res.skipped:
        print(f"# skipped label {lab} (absent from both)", file=sys.stderr)


def _truth(path, grid) -> np.ndarray:
    vol = load_vectors(path)
    grid.check_same(vol.grid, "truth")
    return vol.data[:3].astype(float)


def cmd_metrics_corr(a):
    field = load_field(a.field)
    truth = _truth(a.truth, field.grid)
    if a.demons:
        rs, rp = demons.demons_variance_error_correlation(field, truth, demons.load_nonparam(a.demons))
    else:
        m = field.mask
        var = m.gather(field.std**2).sum(axis=0)
        err = m.gather(synth.error_field(field, truth).values)
        rs, rp = metrics.spearman(var, err), metrics.pearson(var, err)
    report([("spearman", rs), ("pearson", rp)], a.out)


def cmd_loss_coord(a):
    field = load_field(a.field)
    truth = _truth(a.truth, field.grid)
    pred = field.mean if not a.pred else _truth(a.pred, field.grid)
    report([(f"loss_coord_{a.norm}", metrics.loss_coord(pred, truth, field.mask, a.norm))], a.out)


def cmd_loss_mask(a):
    vol = volume_io.read_uaf(_require(a.pred))
    if vol.channels != 1:
        raise CLIError(f"{a.pred}: expected a single probability channel")
    pred = metrics.MaskPrediction(vol.grid, vol.data[0].astype(float))
    report([("loss_mask", metrics.loss_mask(pred, load_mask(a.truth)))], a.out)


def cmd_loss_seg(a):
    mask = load_mask(a.mask) if a.mask else None
    report([("loss_seg", metrics.loss_seg(load_labels(a.warped), load_labels(a.truth), mask))], a.out)


def cmd_loss_uncer(a):
    field = load_field(a.field)
    truth = _truth(a.truth, field.grid)
    std = field.std
    if a.logvar:
        lv = load_vectors(a.logvar)
        std = metrics.std_from_logvar(lv.data[:3])
    value = metrics.loss_uncer(field.mean, std, truth, field.mask, a.dist)
    report([(f"loss_uncer_{a.dist}", value)], a.out)


def cmd_loss_total(a):
    w = metrics.LossWeights(a.lambda_mask, a.lambda_seg, a.lambda_uncer)
    report([("loss_total", metrics.loss_total(a.coord, a.mask, a.seg, a.uncer, w))], a.out)


def _read_any(path):
    path = _require(path)
    if str(path).endswith(".nii"):
        v = volume_io.read_nifti(path)
        return v.grid, v.data, v.channels, {2: volume_io.UINT8, 4: volume_io.UINT16, 16: volume_io.FLOAT32}[v.datatype]
    v = volume_io.read_uaf(path)
    return v.grid, v.data, v.channels, v.dtype_code


def cmd_convert(a):
    if a.mean or a.std or a.logvar:
        if not (a.mean and a.mask_in and bool(a.std) != bool(a.logvar)):
            raise CLIError("field conversion needs --mean, --mask and exactly one of --std/--logvar")
        grid, mean, _, _ = _read_any(a.mean)
        _, spread, _, _ = _read_any(a.std or a.logvar)
        _, mvol, _, _ = _read_any(a.mask_in)
        std = metrics.std_from_logvar(spread) if a.logvar else spread
        mask = Mask(grid, mvol[0] > 0)
        field = MeanStdField(grid, mean[:3], std[:3], mask)
        volume_io.write_raw_field(a.out, field)
        return
    if not a.input:
        raise CLIError("convert needs --in (or field inputs)")
    grid, data, channels, code = _read_any(a.input)
    if str(a.out).endswith(".nii"):
        dt = {volume_io.FLOAT32: np.float32, volume_io.UINT16: np.int16, volume_io.UINT8: np.uint8}[code]
        volume_io.write_nifti(a.out, grid, data, channels, dt)
    else:
        volume_io.write_uaf(a.out, grid, data, channels, code)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_weighting(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--weighted", dest="weighted", action="store_true", default=True, help="precision-weighted fit (default)")
    g.add_argument("--unweighted", dest="weighted", action="store_false", help="identity weights")
    p.add_argument("--epsilon", type=float, default=None, help="Tikhonov term (default 1e-8*trace/B)")


def _add_bspline(p):
    p.add_argument("--spacing", type=float, default=basis.DEFAULT_BSPLINE_SPACING_MM, help="control spacing in mm")
    p.add_argument("--max-columns", type=int, default=basis.DEFAULT_MAX_COLUMNS)


def _add_kernel(p):
    p.add_argument("--sigma", type=float, default=demons.DEFAULT_SIGMA_MM, help="Gaussian kernel sigma in mm")
    p.add_argument("--truncation", type=float, default=demons.DEFAULT_TRUNCATION, help="kernel radius in sigmas")
    p.add_argument("--mode", choices=demons.MODES, default="precision")


def _document_defaults(parser: argparse.ArgumentParser) -> None:
    """Give help text to options that have none so their defaults are listed."""
    for act in parser._actions:
        if act.help is None and act.option_strings and not act.required and act.default is not None:
            act.help = "(default: %(default)s)"


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="uncreg", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--threads", type=int, default=None, help="worker cap (env UNCREG_THREADS)")
    parser.add_argument("--config", default=None, help="key = value file supplying defaults")
    sub = parser.add_subparsers(dest="command", required=True)
    leaves: dict = {}

    def leaf(parent, name, func, **kw):
        p = parent.add_parser(name, formatter_class=fmt, **kw)
        p.set_defaults(func=func)
        leaves[func] = p
        return p

    def group(name, help):
        p = sub.add_parser(name, help=help, formatter_class=fmt)
        return p.add_subparsers(dest="subcommand", required=True)

    s = group("synth", "synthetic data")
    p = leaf(s, "gen", cmd_synth_gen, help="generate a synthetic case")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32])
    p.add_argument("--spacing", type=float, nargs=3, default=[2.0, 2.0, 2.0])
    p.add_argument("--affine", type=float, nargs=12, default=None, help="3x4 row-major matrix")
    p.add_argument("--bump", type=float, nargs=7, action="append", metavar="V", help="cx cy cz width ax ay az")
    p.add_argument("--noise", choices=synth.NOISE_KINDS, default="cortex")
    p.add_argument("--sigma-min", type=float, default=0.5)
    p.add_argument("--sigma-max", type=float, default=4.0)
    p.add_argument("--shell-fraction", type=float, default=0.85)
    p.add_argument("--shell-width", type=float, default=3.0)
    p.add_argument("--radius", type=float, default=None, help="mask radius in mm")
    p.add_argument("--atlas", choices=synth.ATLAS_PATTERNS, default="shells")
    p.add_argument("--labels", type=int, default=4)
    p.add_argument("--miscalibration", type=float, default=1.0)
    p.add_argument("--nifti", action="store_true", help="also write NIfTI copies")

    f = group("fit", "fit a transformation model")
    for name, func, extra in (
        ("affine", cmd_fit_affine, None),
        ("bspline", cmd_fit_bspline, _add_bspline),
        ("joint", cmd_fit_joint, _add_bspline),
    ):
        p = leaf(f, name, func)
        p.add_argument("--field", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--field-out", default=None, help="write the most likely transform")
        _add_weighting(p)
        if extra:
            extra(p)
    p = leaf(f, "sequential", cmd_fit_sequential)
    p.add_argument("--field", required=True)
    p.add_argument("--out-affine", required=True)
    p.add_argument("--out-bspline", required=True)
    p.add_argument("--field-out", default=None)
    _add_weighting(p)
    _add_bspline(p)
    p = leaf(f, "demons", cmd_fit_demons)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    _add_kernel(p)
    p.add_argument("--paper-variance", action="store_true", help="use (K.K)*std^2 in precision mode")

    p = leaf(sub, "sample", cmd_sample, help="draw transform samples")
    p.add_argument("--field", required=True)
    p.add_argument("--posterior", default=None)
    p.add_argument("--demons", default=None, help="demons posterior prefix")
    p.add_argument("--n", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--literal-paper-noise", action="store_true", help="perturb by std^2*g instead of std*g")

    p = leaf(sub, "variance", cmd_variance, help="coefficient variance map")
    p.add_argument("--posterior", required=True)
    p.add_argument("--out", required=True)

    p = leaf(sub, "modes", cmd_modes, help="leading modes of variation")
    p.add_argument("--posterior", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--oversample", type=int, default=wls.DEFAULT_OVERSAMPLE)
    p.add_argument("--power-iters", type=int, default=wls.DEFAULT_POWER_ITERS)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mode-index", type=int, default=1, help="1-based mode to displace along")
    p.add_argument("--scales", type=float, nargs="+", default=[-3.0, 0.0, 3.0])
    p.add_argument("--scale-min", type=float, default=wls.DEFAULT_SCALE_RANGE[0])
    p.add_argument("--scale-max", type=float, default=wls.DEFAULT_SCALE_RANGE[1])
    p.add_argument("--sqrt-eigenvalue", action="store_true", help="step by sqrt(lambda) instead of lambda")
    p.add_argument("--out", default=None)
    p.add_argument("--eigen-out", default=None)

    p = leaf(sub, "warp-labels", cmd_warp_labels, help="pull atlas labels through a transform")
    p.add_argument("--transform", required=True)
    p.add_argument("--index", type=int, default=0, help="field index inside a sample stack")
    p.add_argument("--atlas", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)

    p = leaf(sub, "entropy", cmd_entropy, help="label entropy over transform samples")
    p.add_argument("--samples", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dist-out", default=None)
    p.add_argument("--vote-out", default=None)

    m = group("metrics", "evaluation statistics")
    p = leaf(m, "dice", cmd_metrics_dice)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--labels", type=int, nargs="+", default=None)
    p.add_argument("--out", default=None)
    p = leaf(m, "corr", cmd_metrics_corr)
    p.add_argument("--field", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--demons", default=None, help="correlate the smoothed variance of this posterior")
    p.add_argument("--out", default=None)

    lo = group("loss", "training-loss evaluators")
    p = leaf(lo, "coord", cmd_loss_coord)
    p.add_argument("--field", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", default=None, help="3-channel prediction (default: field mean)")
    p.add_argument("--norm", choices=("l1", "l2"), default="l2")
    p.add_argument("--out", default=None)
    p = leaf(lo, "mask", cmd_loss_mask)
    p.add_argument("--pred", required=True, help="1-channel float32 probability volume")
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None)
    p = leaf(lo, "seg", cmd_loss_seg)
    p.add_argument("--warped", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", default=None)
    p = leaf(lo, "uncer", cmd_loss_uncer)
    p.add_argument("--field", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--logvar", default=None, help="3-channel log-variance volume replacing the field std")
    p.add_argument("--dist", choices=("gaussian", "laplace"), default="gaussian")
    p.add_argument("--out", default=None)
    p = leaf(lo, "total", cmd_loss_total)
    for name in ("coord", "mask", "seg", "uncer"):
        p.add_argument(f"--{name}", type=float, default=None)
    p.add_argument("--lambda-mask", type=float, default=metrics.LossWeights.lambda_mask)
    p.add_argument("--lambda-seg", type=float, default=metrics.LossWeights.lambda_seg)
    p.add_argument("--lambda-uncer", type=float, default=metrics.LossWeights.lambda_uncer)
    p.add_argument("--out", default=None)

    p = leaf(sub, "convert", cmd_convert, help="NIfTI <-> UAF1, or assemble a mean/std field")
    p.add_argument("--in", dest="input", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--mean", default=None)
    p.add_argument("--std", default=None)
    p.add_argument("--logvar", default=None)
    p.add_argument("--mask", dest="mask_in", default=None)
    for p in leaves.values():
        _document_defaults(p)
    return parser, leaves


def read_config(path) -> dict[str, str]:
    cfg = {}
    for n, line in enumerate(Path(_require(path)).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        cfg[k.strip().replace("-", "_")] = v.strip()
    return cfg


def _apply_config(leaf: argparse.ArgumentParser, cfg: dict) -> None:
    actions = {a.dest: a for a in leaf._actions if a.dest != "help"}
    defaults = {}
    for key, raw in cfg.items():
        if key not in actions:
            raise CLIError(f"unknown config key {key!r}")
        act = actions[key]
        if act.nargs in ("+", "*") or isinstance(act.nargs, int):
            conv = act.type or str
            defaults[key] = [conv(v) for v in raw.split()]
        elif act.const is not None and act.nargs == 0:
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = (act.type or str)(raw)
    for act in leaf._actions:
        if act.dest in defaults:
            act.required = False
    leaf.set_defaults(**defaults)


def _echo(args) -> None:
    skip = {"func", "config"}
    for k, v in sorted(vars(args).items()):
        if k not in skip:
            print(f"# {k} = {v}", file=sys.stderr)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, leaves = build_parser()
    try:
        if "--config" in argv:
            i = argv.index("--config")
            if i + 1 >= len(argv):
                raise CLIError("--config needs a path")
            func = _select_leaf(leaves, argv)
            _apply_config(leaves[func], read_config(argv[i + 1]))
        args = parser.parse_args(argv)
        threads = args.threads
        if threads is None and os.environ.get(THREADS_ENV):
            threads = int(os.environ[THREADS_ENV])
        set_threads(threads)
        _echo(args)
        args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # single-line machine-parsable error
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    finally:
        set_threads(None)
    return 0


def _select_leaf(leaves, argv):
    """Return the handler of the subcommand named on the command line."""
    words = [w for w in argv if not w.startswith("-")]
    for func, leaf in leaves.items():
        path = leaf.prog.split()[1:]
        if path and all(p in words for p in path) and _is_prefix_path(words, path):
            return func
    raise CLIError("could not determine the subcommand for --config")


def _is_prefix_path(words, path):
    try:
        start = words.index(path[0])
    except ValueError:
        return False
    return words[start:start + len(path)] == path


if __name__ == "__main__":
    sys.exit(main())
