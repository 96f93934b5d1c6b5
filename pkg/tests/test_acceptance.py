"""Acceptance suite.

One test per criterion, each printing a single PASS/FAIL line with the
measured quantity and its tolerance (visible under -s, or in the captured
output of a failure). Criteria 1-7 are property checks that run in seconds
on synthetic data. Criteria 8-12 reproduce published table numbers and
need the classic corpora on disk: point DEEPAM_DATA_DIR (or ./data) at a
directory holding train91/, Set5/ and Set14/; without them those tests
skip. Criterion 13 checks structural claims on an edge-rich synthetic
corpus and always runs.
"""

import os

import numpy as np
import pytest

from deepam import patch_pipeline as pp
from deepam.cli import _super_resolve
from deepam.ipad import (compute_subspace, default_grid, estimate_sigmas,
                         ls_fit, search_rho_ipad)
from deepam.cad import layer_synthesis, search_rho_cad
from deepam.manifold_opt import (GoalPlusConfig, ObjectiveSpec, SubspaceBasis,
                                 gradient, objective_value, optimize,
                                 soft_threshold, tangent_projector)
from deepam.model import (AnalysisLayer, DeepAMModel, TrainConfig,
                          atom_correlation_diagnostic, forward, load,
                          relu_forward, rescale_for_noise, save,
                          to_relu_network, train)

from conftest import dead_leaves, stack_pairs


def _line(n, ok, detail):
    print("CRITERION %d: %s (%s)" % (n, "PASS" if ok else "FAIL", detail), flush=True)
    return ok


def _data_root():
    here = os.path.dirname(os.path.abspath(__file__))
    for cand in (os.environ.get("DEEPAM_DATA_DIR"), "data",
                 os.path.join(here, "..", "data")):
        if cand and os.path.isdir(cand):
            return cand
    return None


def _dataset(name):
    root = _data_root()
    if root is None:
        pytest.skip("no datasets on disk; set DEEPAM_DATA_DIR to a directory "
                    "holding train91/, Set5/, Set14/")
    path = os.path.join(root, name)
    if not os.path.isdir(path):
        pytest.skip("dataset %s/ missing under %s" % (name, root))
    return path


def _image_files(directory):
    return [os.path.join(directory, n) for n in sorted(os.listdir(directory))
            if n.lower().endswith((".png", ".bmp"))]


def _psnr_rows(model, test_dir, sigma_t=None, seed=0):
    """(name, psnr_model, psnr_bicubic) per image; model None = bicubic only."""
    geom = model.geom if model is not None else pp.PatchGeometry()
    rows = []
    for idx, path in enumerate(_image_files(test_dir)):
        gt = pp.modcrop(pp.load_luminance(path), geom.s)
        lr = pp.resize_bicubic(gt, 1.0 / geom.s)
        if sigma_t is not None:
            lr = pp.add_gaussian_noise(lr, sigma_t, seed + idx)
        bic = pp.resize_bicubic(lr, geom.s)
        pred = bic if model is None else _super_resolve(model, lr)
        name = os.path.splitext(os.path.basename(path))[0].lower()
        rows.append((name, pp.psnr(gt, pred), pp.psnr(gt, bic)))
    return rows


def _training_pool(train_dir, stride, n_pairs, seed, noise_sigma=0.0):
    """Extract pairs from every image, then cap with a seeded global subsample."""
    files = _image_files(train_dir)
    counts = []
    for idx, path in enumerate(files):
        lum = pp.load_luminance(path)
        counts.append(pp.extract_pairs(lum, stride_train=stride,
                                       noise_sigma=noise_sigma,
                                       noise_seed=seed + idx + 1).n)
    total = int(np.sum(counts))
    if n_pairs is not None and n_pairs < total:
        keep = np.sort(np.random.default_rng(seed).choice(total, n_pairs,
                                                          replace=False))
    else:
        keep = np.arange(total)
    parts = []
    offset = 0
    for idx, path in enumerate(files):
        lum = pp.load_luminance(path)
        ds = pp.extract_pairs(lum, stride_train=stride, noise_sigma=noise_sigma,
                              noise_seed=seed + idx + 1)
        local = keep[(keep >= offset) & (keep < offset + ds.n)] - offset
        parts.append(pp.PatchDataset(x0=ds.x0[:, local], y=ds.y[:, local],
                                     lr_means=ds.lr_means[local],
                                     positions=ds.positions[local],
                                     geom=ds.geom))
        offset += ds.n
    return pp.PatchDataset(x0=np.hstack([d.x0 for d in parts]),
                           y=np.hstack([d.y for d in parts]),
                           lr_means=np.concatenate([d.lr_means for d in parts]),
                           positions=np.vstack([d.positions for d in parts]),
                           geom=parts[0].geom)


def _random_model(seed, dims=(12, 30, 24, 18), d_out=20):
    rng = np.random.default_rng(seed)
    layers = [AnalysisLayer(omega=rng.standard_normal((d, d_in)),
                            lam=rng.uniform(0.02, 0.5, size=d), d_ipad=d // 2)
              for d_in, d in zip(dims[:-1], dims[1:])]
    return DeepAMModel(layers=layers, d=rng.standard_normal((d_out, dims[-1])))


@pytest.fixture(scope="module")
def leaves_model():
    """Single-layer model with a wide clustering block on edge-rich data."""
    ds = stack_pairs([dead_leaves(s) for s in range(3)])
    return train(ds, [(196, None)], TrainConfig(seed=0)), ds


def test_criterion_01_relu_equivalence():
    worst = 0.0
    for seed in range(3):
        model = _random_model(seed)
        net = to_relu_network(model)
        x = np.random.default_rng(50 + seed).standard_normal((12, 10000))
        worst = max(worst, float(np.max(np.abs(relu_forward(net, x)
                                               - forward(model, x)))))
    assert _line(1, worst <= 1e-9,
                 "max forward/rectifier deviation %.3g (tol 1e-9) over 3x10^4 inputs"
                 % worst)


def test_criterion_02_gradient_checks():
    def fd_worst(spec, omega, entries):
        g = gradient(spec, omega)
        eps = 1e-6
        worst = 0.0
        for i, j in entries:
            op = omega.copy(); op[i, j] += eps
            om = omega.copy(); om[i, j] -= eps
            fd = (objective_value(spec, op) - objective_value(spec, om)) / (2 * eps)
            worst = max(worst, abs(fd - g[i, j]) / max(abs(fd), 1e-8))
        return worst

    rng = np.random.default_rng(7)
    worst = {"g": 0.0, "h": 0.0, "p": 0.0}
    for _ in range(20):
        n = int(rng.integers(4, 9))
        m = n + int(rng.integers(1, 6))
        x = rng.standard_normal((n, 30))
        basis = SubspaceBasis(w=np.eye(n), u=np.zeros((n, 0)), k=n)
        entries = [(int(rng.integers(0, m)), int(rng.integers(0, n)))
                   for _ in range(4)]
        om = rng.standard_normal((m, n))
        worst["g"] = max(worst["g"], fd_worst(
            ObjectiveSpec(x=x, basis=basis, nu=100.0 * n, kappa=0.0), om, entries))
        worst["h"] = max(worst["h"], fd_worst(
            ObjectiveSpec(x=np.zeros((n, 5)), basis=basis, nu=10.0,
                          kappa=float(n)), om, entries))
        e = 0.3 * rng.standard_normal((n, 30))
        worst["p"] = max(worst["p"], fd_worst(
            ObjectiveSpec(x=x, basis=basis, nu=100.0 * n, kappa=0.1 * m,
                          mu=100.0, ymid=x, e=e), om, entries))
    bad = max(worst.values())
    assert _line(2, bad <= 1e-5,
                 "worst rel. gradient error g=%.2g h=%.2g p=%.2g (tol 1e-5), "
                 "20 instances each" % (worst["g"], worst["h"], worst["p"]))


def test_criterion_03_manifold_invariants():
    rng = np.random.default_rng(3)
    worst_norm = worst_u = 0.0
    monotone = True
    for trial in range(5):
        n, k, m = 10, 6, 14
        b = np.linalg.qr(rng.standard_normal((n, k)))[0]
        x = b @ rng.laplace(size=(k, 400))
        basis = compute_subspace(x)
        spec = ObjectiveSpec(x=x, basis=basis, nu=100.0 * n, kappa=float(m))
        cfg = GoalPlusConfig(nu=100.0 * n, kappa=float(m), max_iters=60)
        res = optimize(spec, rng.standard_normal((m, n)), basis, cfg)
        worst_norm = max(worst_norm, float(np.max(np.abs(
            np.linalg.norm(res.omega, axis=1) - 1.0))))
        if basis.u.size:
            worst_u = max(worst_u, float(np.max(np.abs(basis.u.T @ res.omega.T))))
        trace = np.asarray(res.objective_trace)
        monotone = monotone and bool(np.all(np.diff(trace) <= 1e-12))
    ok = worst_norm <= 1e-12 and worst_u <= 1e-8 and monotone
    assert _line(3, ok, "row-norm dev %.2g (tol 1e-12), forbidden-subspace leak "
                 "%.2g (tol 1e-8), trace monotone=%s" % (worst_norm, worst_u, monotone))


def test_criterion_04_tangent_projection():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        n, k = 9, 5
        b = np.linalg.qr(rng.standard_normal((n, k)))[0]
        basis = SubspaceBasis(w=b, u=np.linalg.qr(rng.standard_normal((n, n)))[0][:, k:],
                              k=k)
        row = rng.standard_normal(n)
        row -= basis.u @ (basis.u.T @ row)
        row /= np.linalg.norm(row)
        p = tangent_projector(row, basis)
        worst = max(worst, float(np.max(np.abs(p @ row))))
        worst = max(worst, float(np.max(np.abs(p - p.T))))
        worst = max(worst, float(np.max(np.abs(p @ p - p))))
    assert _line(4, worst <= 1e-10,
                 "projector kills its row, symmetric, idempotent to %.2g (tol 1e-10)"
                 % worst)


def test_criterion_05_least_squares():
    rng = np.random.default_rng(5)
    worst_ridge = worst_oracle = 0.0
    for _ in range(5):
        x = rng.standard_normal((20, 400))
        y = rng.standard_normal((50, 400))
        d = layer_synthesis(x, y).d
        lhs = (x @ x.T + np.eye(20)) @ d.T
        rhs = x @ y.T
        worst_ridge = max(worst_ridge, float(np.max(np.abs(lhs - rhs))
                                             / np.max(np.abs(rhs))))
        aug = np.vstack([x.T, np.eye(20)])
        tgt = np.vstack([y.T, np.zeros((20, 50))])
        d_ref = np.linalg.lstsq(aug, tgt, rcond=None)[0].T
        worst_oracle = max(worst_oracle, float(np.max(np.abs(d - d_ref))))
        z = soft_threshold(rng.standard_normal((15, 400)), 0.2)
        g = ls_fit(y, z)
        worst_ridge = max(worst_ridge, float(np.max(np.abs(z @ z.T @ g.T - z @ y.T))
                                             / np.max(np.abs(z @ y.T))))
    ok = worst_ridge <= 1e-8 and worst_oracle <= 1e-6
    assert _line(5, ok, "normal-equation residual %.2g rel (tol 1e-8), dense-solver "
                 "gap %.2g" % (worst_ridge, worst_oracle))


def test_criterion_06_grid_searches():
    rng = np.random.default_rng(6)
    grid = default_grid()
    worst_score = 0.0
    argmin_exact = True
    for trial in range(5):
        om = rng.standard_normal((8, 6))
        x = rng.laplace(size=(6, 300))
        y = rng.standard_normal((9, 6)) @ x + 0.2 * rng.standard_normal((9, 300))
        stats = estimate_sigmas(om, x)
        for search, lam_base in ((search_rho_ipad, 1.0 / stats.sigmas),
                                 (search_rho_cad, stats.sigmas)):
            res = search(om, x, y, stats, grid)
            scores = []
            for rho in grid.rho_values:
                z = soft_threshold(om @ x, rho * lam_base)
                if np.any(z):
                    g = ls_fit(y, z)
                    scores.append(float(np.sum((y - g @ z) ** 2)))
                else:
                    scores.append(float(np.sum(y * y)))
            best = int(np.argmin(scores))
            argmin_exact = argmin_exact and res.rho == grid.rho_values[best]
            worst_score = max(worst_score, abs(res.score - scores[best])
                              / max(scores[best], 1e-30))
    ok = argmin_exact and worst_score <= 1e-10
    assert _line(6, ok, "argmin exact=%s, score reproducible to %.2g rel (tol 1e-10)"
                 % (argmin_exact, worst_score))


def test_criterion_07_round_trips(tmp_path):
    model = _random_model(7)
    path = str(tmp_path / "rt.dam")
    save(model, path)
    back = load(path)
    bitwise = np.array_equal(back.d, model.d) and all(
        np.array_equal(a.omega, b.omega) and np.array_equal(a.lam, b.lam)
        for a, b in zip(model.layers, back.layers))

    geom = pp.PatchGeometry()
    hr = pp.modcrop(np.random.default_rng(70).random((60, 64)), geom.s)
    lr = pp.resize_bicubic(hr, 1.0 / geom.s)
    x0, means, pos = pp.extract_lr_patches(lr, geom, stride=1)
    side = geom.hr_side
    cols = [hr[r * geom.s:r * geom.s + side, c * geom.s:c * geom.s + side].flatten()
            for r, c in pos]
    patches = np.stack(cols, axis=1) - means[None, :]
    rec = pp.reconstruct(patches, means, pos, geom, hr.shape)
    off = (side - geom.crop_side) // 2
    inner = (slice(off, hr.shape[0] - off), slice(off, hr.shape[1] - off))
    dev = float(np.abs(rec[inner] - hr[inner]).max())
    ok = bitwise and dev <= 1e-12
    assert _line(7, ok, "serialization bitwise=%s, reconstruct identity %.2g on "
                 "covered region (tol 1e-12)" % (bitwise, dev))


def test_criterion_08_bicubic_baselines():
    set5 = _dataset("Set5")
    set14 = _dataset("Set14")
    avg5 = float(np.mean([r[2] for r in _psnr_rows(None, set5)]))
    avg14 = float(np.mean([r[2] for r in _psnr_rows(None, set14)]))
    ok = abs(avg5 - 33.66) <= 0.10 and abs(avg14 - 30.23) <= 0.10
    assert _line(8, ok, "bicubic x2 Set5 %.2f dB (target 33.66+-0.10), Set14 %.2f dB "
                 "(target 30.23+-0.10)" % (avg5, avg14))


@pytest.fixture(scope="module")
def small_data_model():
    train_dir = _dataset("train91")
    ds = _training_pool(train_dir, stride=3, n_pairs=5000, seed=0)
    model, _ = train(ds, [(256, None)] * 3, TrainConfig(seed=0))
    return model


def test_criterion_09_small_data_model(small_data_model):
    set5 = _dataset("Set5")
    set14 = _dataset("Set14")
    avg5 = float(np.mean([r[1] for r in _psnr_rows(small_data_model, set5)]))
    avg14 = float(np.mean([r[1] for r in _psnr_rows(small_data_model, set14)]))
    ok = abs(avg5 - 35.96) <= 0.5 and abs(avg14 - 31.87) <= 0.5
    assert _line(9, ok, "5k-pair model Set5 %.2f dB (target 35.96+-0.5), Set14 %.2f "
                 "dB (target 31.87+-0.5)" % (avg5, avg14))


def test_criterion_10_large_data_model():
    train_dir = _dataset("train91")
    set5 = _dataset("Set5")
    ds = _training_pool(train_dir, stride=1, n_pairs=320000, seed=0)
    model, _ = train(ds, [(256, None)] * 3, TrainConfig(seed=0))
    avg5 = float(np.mean([r[1] for r in _psnr_rows(model, set5)]))
    assert _line(10, avg5 >= 36.0, "320k-pair model Set5 %.2f dB (floor 36.0)" % avg5)


def test_criterion_11_self_example():
    set5 = _dataset("Set5")
    geom = pp.PatchGeometry()
    gains = []
    butterfly = None
    for path in _image_files(set5):
        gt = pp.modcrop(pp.load_luminance(path), geom.s)
        lr = pp.resize_bicubic(gt, 1.0 / geom.s)
        ds = pp.extract_pairs(lr, stride_train=1)
        model, _ = train(ds, [(256, None)] * 3,
                         TrainConfig(seed=0, single_batch_iters=1000))
        sr = _super_resolve(model, lr)
        bic = pp.resize_bicubic(lr, geom.s)
        p_sr, p_bic = pp.psnr(gt, sr), pp.psnr(gt, bic)
        gains.append((p_sr, p_bic))
        if "butterfly" in os.path.basename(path).lower():
            butterfly = p_sr
    avg_sr = float(np.mean([g[0] for g in gains]))
    avg_bic = float(np.mean([g[1] for g in gains]))
    ok = avg_sr >= avg_bic + 2.0 and (butterfly is None or butterfly >= 30.5)
    assert _line(11, ok, "self-example Set5 %.2f vs bicubic %.2f dB (need +2.0), "
                 "butterfly %s dB (floor 30.5)" % (avg_sr, avg_bic,
                 "%.2f" % butterfly if butterfly is not None else "absent"))


def test_criterion_12_noise_adaptation():
    train_dir = _dataset("train91")
    set5 = _dataset("Set5")
    sigma_n, sigma_t = 0.1, 0.2
    ds = _training_pool(train_dir, stride=3, n_pairs=5000, seed=0,
                        noise_sigma=sigma_n)
    model, _ = train(ds, [(256, None)] * 3,
                     TrainConfig(seed=0, noise_sigma=sigma_n))
    rescaled = rescale_for_noise(model, sigma_t)
    rows_r = _psnr_rows(rescaled, set5, sigma_t=sigma_t)
    rows_u = _psnr_rows(model, set5, sigma_t=sigma_t)
    avg_gap = float(np.mean([a[1] - b[1] for a, b in zip(rows_r, rows_u)]))
    bird_gap = None
    for a, b in zip(rows_r, rows_u):
        if "bird" in a[0]:
            bird_gap = a[1] - b[1]
    noop = rescale_for_noise(model, sigma_n)
    exact = np.array_equal(noop.layers[0].lam, model.layers[0].lam)
    ok = avg_gap >= 2.0 and (bird_gap is None or bird_gap >= 3.0) and exact
    assert _line(12, ok, "rescaling gain Set5 %.2f dB (need 2.0), bird %s dB (need "
                 "3.0), matched-noise no-op exact=%s" % (avg_gap,
                 "%.2f" % bird_gap if bird_gap is not None else "absent", exact))


def test_criterion_13_bimodal_structure(leaves_model):
    (model, report), ds = leaves_model
    entry = report.layers[0]
    surv = np.asarray(entry["survivor_fractions"])
    k = entry["d_ipad"]
    min_ipad, max_cad = float(surv[:k].min()), float(surv[k:].max())
    vals, is_ipad = atom_correlation_diagnostic(model)
    corr_ipad = float(np.mean(np.abs(vals[is_ipad])))
    corr_cad = float(np.mean(np.abs(vals[~is_ipad])))
    ok = min_ipad > max_cad and corr_ipad > corr_cad
    assert _line(13, ok, "survivor gap: min IPAD %.3f > max CAD %.3f; back-projection "
                 "alignment IPAD %.3f > CAD %.3f" % (min_ipad, max_cad,
                                                     corr_ipad, corr_cad))
