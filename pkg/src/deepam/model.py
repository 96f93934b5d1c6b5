"""The deep analysis model: cascaded analysis layers with soft-thresholding
and one synthesis dictionary. Training is layer by layer; each layer learns
an information preserving block with small thresholds and a clustering
block with large thresholds, then propagates its features.
"""

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import cad as cad_mod
from . import ipad as ipad_mod
from .errors import ModelFormatError
from .manifold_opt import GoalPlusConfig, soft_threshold
from .patch_pipeline import PatchGeometry, resize_bicubic

MAGIC = b"DAM1"
FORMAT_VERSION = 1


@dataclass
class AnalysisLayer:
    """One layer: dictionary omega (d_i x d_{i-1}), thresholds lam (d_i),
    and the split index d_ipad (first d_ipad rows are the IPAD block)."""
    omega: np.ndarray
    lam: np.ndarray
    d_ipad: int

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.lam.shape != (self.omega.shape[0],):
            raise ValueError("threshold length does not match atom count")
        if np.any(self.lam < 0):
            raise ValueError("thresholds must be nonnegative")
        if not (0 <= self.d_ipad <= self.omega.shape[0]):
            raise ValueError("d_ipad out of range")

    @property
    def d_in(self):
        return self.omega.shape[1]

    @property
    def d_out(self):
        return self.omega.shape[0]


@dataclass
class DeepAMModel:
    layers: list
    d: np.ndarray
    geom: PatchGeometry = field(default_factory=PatchGeometry)
    training_noise_sigma: float = 0.0

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        prev = None
        for layer in self.layers:
            if prev is not None and layer.d_in != prev:
                raise ValueError("adjacent layer dimensions do not chain")
            prev = layer.d_out
        if prev is not None and self.d.shape[1] != prev:
            raise ValueError("synthesis dictionary does not match the last layer")

    @property
    def n_layers(self):
        return len(self.layers)


@dataclass
class ReluNetwork:
    """Feed-forward equivalent: sign-doubled weights, rectification biases.

    weights has one matrix per analysis layer plus the final linear map;
    biases covers the rectified layers only.
    """
    weights: list
    biases: list


@dataclass
class TrainConfig:
    seed: int = 0
    grid: ipad_mod.ThresholdSearchGrid = None
    rank_rel_tol: float = 1e-5
    batch_size: int = None
    n_batches: int = 15
    iters_per_batch: int = 100
    single_batch_iters: int = 500
    rethreshold_each_batch: bool = False
    noise_sigma: float = 0.0


@dataclass
class TrainingReport:
    k0: int
    seed: int
    layers: list = field(default_factory=list)

    def to_dict(self):
        return {"k0": self.k0, "seed": self.seed, "layers": self.layers}


def forward(model, x0):
    """Evaluate the cascade; accepts a single vector or a matrix of columns."""
    a = np.asarray(x0, dtype=np.float64)
    d_in = model.layers[0].d_in if model.layers else model.d.shape[1]
    if a.shape[0] != d_in:
        raise ValueError("input dimension %d does not match %d" % (a.shape[0], d_in))
    for layer in model.layers:
        a = soft_threshold(layer.omega @ a, layer.lam)
    return model.d @ a


def final_synthesis(x_l, y):
    """Closed-form ridge LS synthesis dictionary on the deepest features."""
    return cad_mod.layer_synthesis(x_l, y).d


def _batch_schedule(n, config, rng):
    size = config.batch_size or min(n, 40000)
    if size >= n:
        return [np.arange(n)], config.single_batch_iters
    batches = []
    pool = rng.permutation(n)
    pos = 0
    for _ in range(config.n_batches):
        if pos + size > n:
            pool = rng.permutation(n)
            pos = 0
        batches.append(pool[pos:pos + size])
        pos += size
    return batches, config.iters_per_batch


def _resolve_arch(arch, k0, noise_sigma):
    resolved = []
    for i, entry in enumerate(arch):
        d_i, d_ipad = entry
        if d_ipad is None:
            d_ipad = 3 * k0 if (i == 0 and noise_sigma > 0) else k0
        d_i, d_ipad = int(d_i), int(d_ipad)
        if d_ipad > d_i:
            raise ValueError("layer %d: %d IPAD atoms exceed layer width %d"
                             % (i + 1, d_ipad, d_i))
        if d_ipad < k0:
            raise ValueError("layer %d: %d IPAD atoms cannot span rank %d input"
                             % (i + 1, d_ipad, k0))
        resolved.append((d_i, d_ipad))
    return resolved


def train(dataset, arch, config=None):
    """Layer-wise training on a patch dataset.

    arch is a list of (d_i, d_ipad_i) pairs; d_ipad_i of None picks the
    input rank (tripled in the first layer of a noisy model). Returns
    (model, report).
    """
    config = config or TrainConfig()
    grid = config.grid or ipad_mod.default_grid()
    rng = np.random.default_rng(config.seed)
    x = np.asarray(dataset.x0, dtype=np.float64)
    y = np.asarray(dataset.y, dtype=np.float64)
    n = x.shape[1]

    if len(arch) == 0:
        model = DeepAMModel(layers=[], d=final_synthesis(x, y), geom=dataset.geom,
                            training_noise_sigma=config.noise_sigma)
        return model, TrainingReport(k0=0, seed=config.seed)

    basis0 = ipad_mod.compute_subspace(x, rel_tol=config.rank_rel_tol)
    k0 = basis0.k
    arch = _resolve_arch(arch, k0, config.noise_sigma)
    basis_y = ipad_mod.compute_subspace(y, rel_tol=config.rank_rel_tol)
    for i, (d_i, d_ipad) in enumerate(arch):
        d_cad = d_i - d_ipad
        if 0 < d_cad < basis_y.k:
            # the log-det barrier needs the clustering block to cover the
            # full target subspace, otherwise its Gram matrix is singular
            raise ValueError(
                "layer %d: %d clustering atoms cannot span the rank-%d target "
                "subspace; need d >= d_ipad + %d" % (i + 1, d_cad, basis_y.k, basis_y.k))
    report = TrainingReport(k0=k0, seed=config.seed)

    layers = []
    for i, (d_i, d_ipad) in enumerate(arch):
        d_prev = x.shape[0]
        d_cad = d_i - d_ipad
        basis_i = basis0 if i == 0 else ipad_mod.compute_subspace(x, rank=k0)
        batches, iters = _batch_schedule(n, config, rng)
        ipad_cfg = GoalPlusConfig(nu=100.0 * d_prev, kappa=float(d_ipad),
                                  max_iters=iters)
        synth = cad_mod.layer_synthesis(x, y)
        psi_cfg = None
        if d_cad > 0:
            psi_cfg = GoalPlusConfig(nu=100.0 * d_prev, kappa=0.1 * d_cad,
                                     mu=100.0, max_iters=iters)

        om_i = None
        psi = None
        ipad_trace = []
        psi_trace = []
        rho_history = []
        xb = yb = None
        for sel in batches:
            xb, yb = x[:, sel], y[:, sel]
            res = ipad_mod.learn_ipad(xb, d_ipad, basis_i, ipad_cfg, rng=rng, init=om_i)
            om_i = res.omega
            ipad_trace.extend(res.objective_trace)
            if d_cad > 0:
                res_p = cad_mod.learn_psi(synth.ymid[:, sel], synth.e[:, sel], d_cad,
                                          basis_y, psi_cfg, rng=rng, init=psi)
                psi = res_p.omega
                psi_trace.extend(res_p.objective_trace)
            if config.rethreshold_each_batch:
                sig = ipad_mod.estimate_sigmas(om_i, xb)
                rho_history.append(ipad_mod.search_rho_ipad(om_i, xb, yb, sig, grid).rho)

        sig_i = ipad_mod.estimate_sigmas(om_i, xb)
        res_i = ipad_mod.search_rho_ipad(om_i, xb, yb, sig_i, grid)
        entry = {"layer": i + 1, "d": d_i, "d_ipad": d_ipad,
                 "rho_ipad": res_i.rho, "score_ipad": res_i.score,
                 "ipad_trace": [float(v) for v in ipad_trace],
                 "dead_ipad_atoms": int(np.count_nonzero(sig_i.dead))}
        if rho_history:
            entry["rho_ipad_per_batch"] = rho_history

        if d_cad > 0:
            om_c = cad_mod.reparam_cad(psi, synth.d)
            sig_c = ipad_mod.estimate_sigmas(om_c, xb)
            y_r = cad_mod.ipad_residual(om_i, res_i.lam, xb, yb)
            res_c = cad_mod.search_rho_cad(om_c, xb, y_r, sig_c, grid)
            omega = np.vstack([om_i, om_c])
            lam = np.concatenate([res_i.lam, res_c.lam])
            entry.update({"rho_cad": res_c.rho, "score_cad": res_c.score,
                          "cad_trace": [float(v) for v in psi_trace],
                          "dropped_cad_atoms": d_cad - om_c.shape[0]})
        else:
            omega, lam = om_i, res_i.lam

        layer = AnalysisLayer(omega=omega, lam=lam, d_ipad=d_ipad)
        layers.append(layer)
        zb = soft_threshold(omega @ xb, lam)
        entry["survivor_fractions"] = [float(v) for v in np.mean(zb != 0, axis=1)]
        report.layers.append(entry)
        x = soft_threshold(omega @ x, lam)

    model = DeepAMModel(layers=layers, d=final_synthesis(x, y), geom=dataset.geom,
                        training_noise_sigma=config.noise_sigma)
    return model, report


def to_relu_network(model):
    """Rewrite the cascade as a rectifier network.

    Soft-thresholding splits into positive and negative half-responses:
    S_lam(a) = relu(a - lam) - relu(-a - lam), so each layer doubles its
    rows with flipped signs and later layers recombine the halves.
    """
    weights = []
    biases = []
    for i, layer in enumerate(model.layers):
        om = layer.omega
        if i == 0:
            w = np.vstack([om, -om])
        else:
            w = np.block([[om, -om], [-om, om]])
        weights.append(w)
        biases.append(-np.concatenate([layer.lam, layer.lam]))
    if model.layers:
        weights.append(np.hstack([model.d, -model.d]))
    else:
        weights.append(model.d.copy())
    return ReluNetwork(weights=weights, biases=biases)


def relu_forward(net, x):
    a = np.asarray(x, dtype=np.float64)
    for w, b in zip(net.weights[:-1], net.biases):
        pre = w @ a
        pre += b[:, None] if pre.ndim == 2 else b
        a = np.maximum(pre, 0.0)
    return net.weights[-1] @ a


def to_relu_container(model):
    """The rectifier network packed into the model container (for export).

    The lam slot of each stored layer holds the rectification offsets
    [lam; lam] (the biases negated) and the synthesis slot holds [D, -D].
    Note the packed file is a transport format: running forward() on it
    would soft-threshold the doubled weights, which is not the rectifier
    semantics. Use relu_network_from_container after loading.
    """
    net = to_relu_network(model)
    if not model.layers:
        return DeepAMModel(layers=[], d=net.weights[0], geom=model.geom,
                           training_noise_sigma=model.training_noise_sigma)
    layers = [AnalysisLayer(omega=w, lam=-b, d_ipad=orig.d_ipad)
              for w, b, orig in zip(net.weights[:-1], net.biases, model.layers)]
    return DeepAMModel(layers=layers, d=net.weights[-1], geom=model.geom,
                       training_noise_sigma=model.training_noise_sigma)


def relu_network_from_container(container):
    """Rebuild the ReluNetwork from a loaded export container."""
    weights = [layer.omega for layer in container.layers] + [container.d]
    biases = [-layer.lam for layer in container.layers]
    return ReluNetwork(weights=weights, biases=biases)


def rescale_for_noise(model, sigma_t):
    """Adapt first-layer thresholds to a test noise level sigma_t.

    IPAD thresholds scale with the noise variance ratio, CAD thresholds
    with the noise level ratio. Only valid for models trained on noisy
    data.
    """
    sigma_n = model.training_noise_sigma
    if sigma_n <= 0:
        raise ValueError("model was trained clean; nothing to rescale")
    if sigma_t < 0:
        raise ValueError("sigma_t must be nonnegative")
    ratio = sigma_t / sigma_n
    first = model.layers[0]
    lam = first.lam.copy()
    lam[:first.d_ipad] *= ratio * ratio
    lam[first.d_ipad:] *= ratio
    layers = [AnalysisLayer(omega=first.omega, lam=lam, d_ipad=first.d_ipad)]
    layers.extend(model.layers[1:])
    return DeepAMModel(layers=layers, d=model.d, geom=model.geom,
                       training_noise_sigma=sigma_n)


def degradation_operator(geom):
    """Linear map from an HR patch to its bicubic-downscaled LR patch.

    Built column by column from the canonical HR basis patches.
    """
    side = geom.hr_side
    h = np.empty((geom.p * geom.p, side * side))
    basis = np.zeros((side, side))
    for k in range(side * side):
        basis.flat[k] = 1.0
        h[:, k] = resize_bicubic(basis, 1.0 / geom.s).ravel()
        basis.flat[k] = 0.0
    return h


def atom_correlation_diagnostic(model, geom=None):
    """Cosine between each analysis atom's HR back-projection and its synthesis atom.

    Only defined for single-layer models. Returns (values, is_ipad) with
    values in [-1, 1].
    """
    if model.n_layers != 1:
        raise ValueError("diagnostic applies to single-layer models")
    geom = geom or model.geom
    h_dag = np.linalg.pinv(degradation_operator(geom))
    layer = model.layers[0]
    back = h_dag @ layer.omega.T
    vals = np.zeros(layer.d_out)
    for j in range(layer.d_out):
        u = back[:, j]
        v = model.d[:, j]
        nu_, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu_ > 0 and nv > 0:
            vals[j] = float(u @ v / (nu_ * nv))
    is_ipad = np.arange(layer.d_out) < layer.d_ipad
    return vals, is_ipad


def save(model, path):
    """Serialize to the binary container; see load() for the layout."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", FORMAT_VERSION, len(model.layers))
    g = model.geom
    buf += struct.pack("<IIII", g.p, g.s, g.crop_side, g.stride)
    buf += struct.pack("<d", float(model.training_noise_sigma))
    for layer in model.layers:
        buf += struct.pack("<III", layer.d_in, layer.d_out, layer.d_ipad)
        buf += np.ascontiguousarray(layer.omega, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(layer.lam, dtype="<f8").tobytes()
    buf += struct.pack("<II", model.d.shape[0], model.d.shape[1])
    buf += np.ascontiguousarray(model.d, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, count, what):
        if self.pos + count > len(self.data) - 4:
            raise ModelFormatError("truncated model file: need %d bytes for %s at byte %d"
                                   % (count, what, self.pos))
        out = self.data[self.pos:self.pos + count]
        self.pos += count
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, what):
        return struct.unpack("<d", self.take(8, what))[0]

    def array(self, shape, what):
        count = int(np.prod(shape)) * 8
        arr = np.frombuffer(self.take(count, what), dtype="<f8").astype(np.float64)
        return arr.reshape(shape)


def load(path):
    """Read a model container.

    Layout: magic "DAM1" | version u32 | layer count u32 | geometry
    (p, s, crop, stride) u32 x4 | training noise sigma f64 | per layer:
    d_in, d_out, d_ipad u32 x3, omega row-major f64, lam f64 | synthesis
    rows, cols u32 x2, D row-major f64 | crc32 u32 over everything before
    it. All little-endian.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    rd = _Reader(data)
    if rd.take(4, "magic") != MAGIC:
        raise ModelFormatError("bad magic; not a model file")
    version = rd.u32("version")
    if version != FORMAT_VERSION:
        raise ModelFormatError("unsupported format version %d" % version)
    n_layers = rd.u32("layer count")
    p, s, crop, stride = (rd.u32("geometry") for _ in range(4))
    sigma_n = rd.f64("noise sigma")
    try:
        geom = PatchGeometry(p=p, s=s, crop_side=crop, stride=stride)
    except ValueError as exc:
        raise ModelFormatError("bad geometry: %s" % exc) from exc
    layers = []
    for i in range(n_layers):
        d_in = rd.u32("layer %d d_in" % i)
        d_out = rd.u32("layer %d d_out" % i)
        d_ipad = rd.u32("layer %d d_ipad" % i)
        if min(d_in, d_out) < 1:
            raise ModelFormatError("layer %d has empty dimensions" % i)
        omega = rd.array((d_out, d_in), "layer %d dictionary" % i)
        lam = rd.array((d_out,), "layer %d thresholds" % i)
        if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(lam))):
            raise ModelFormatError("layer %d contains non-finite values" % i)
        try:
            layers.append(AnalysisLayer(omega=omega, lam=lam, d_ipad=d_ipad))
        except ValueError as exc:
            raise ModelFormatError("layer %d invalid: %s" % (i, exc)) from exc
    rows = rd.u32("synthesis rows")
    cols = rd.u32("synthesis cols")
    d = rd.array((rows, cols), "synthesis dictionary")
    if not np.all(np.isfinite(d)):
        raise ModelFormatError("synthesis dictionary contains non-finite values")
    if rd.pos != len(data) - 4:
        raise ModelFormatError("trailing garbage after byte %d" % rd.pos)
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ModelFormatError("checksum mismatch; file corrupt")
    try:
        return DeepAMModel(layers=layers, d=d, geom=geom, training_noise_sigma=sigma_n)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc


def _norm_patch(vec, side):
    cell = np.full(side * side, 0.5)
    lo, hi = vec.min(), vec.max()
    if hi > lo:
        cell[:vec.size] = (vec - lo) / (hi - lo)
    return cell.reshape(side, side)


def dictionary_mosaic(model, layer):
    """Render a dictionary as a patch mosaic (uint8 RGB).

    layer 1..L renders the effective analysis product down to the input
    domain (intermediate thresholds ignored); layer 0 or "synthesis"
    renders the synthesis dictionary columns. The clustering block starts
    on its own row and is framed in blue.
    """
    if layer in (0, "synthesis", "d"):
        atoms = model.d.T
        d_ipad = model.layers[-1].d_ipad if model.layers else atoms.shape[0]
    else:
        idx = int(layer)
        if not (1 <= idx <= model.n_layers):
            raise ValueError("layer index %s out of range" % layer)
        eff = model.layers[0].omega
        for lyr in model.layers[1:idx]:
            eff = lyr.omega @ eff
        atoms = eff
        d_ipad = model.layers[idx - 1].d_ipad
    n_atoms, length = atoms.shape
    side = int(math.ceil(math.sqrt(length)))
    ncols = int(math.ceil(math.sqrt(n_atoms)))
    ipad_rows = int(math.ceil(d_ipad / ncols))
    n_cad = n_atoms - d_ipad
    cad_rows = int(math.ceil(n_cad / ncols)) if n_cad else 0
    nrows = ipad_rows + cad_rows
    cell = side + 1
    canvas = np.zeros((nrows * cell + 1, ncols * cell + 1))
    for j in range(n_atoms):
        if j < d_ipad:
            r, c = divmod(j, ncols)
        else:
            r, c = divmod(j - d_ipad, ncols)
            r += ipad_rows
        patch = _norm_patch(atoms[j], side)
        canvas[r * cell + 1:r * cell + 1 + side, c * cell + 1:c * cell + 1 + side] = patch
    rgb = np.repeat(np.round(canvas * 255.0).astype(np.uint8)[:, :, None], 3, axis=2)
    if n_cad:
        top = ipad_rows * cell
        bottom = nrows * cell
        blue = np.array([40, 60, 255], dtype=np.uint8)
        rgb[top:top + 2, :, :] = blue
        rgb[bottom - 1:bottom + 1, :, :] = blue
        rgb[top:bottom + 1, :2, :] = blue
        rgb[top:bottom + 1, -2:, :] = blue
    return rgb
