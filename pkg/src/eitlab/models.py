"""The two learned components: conditional score network and voltage net.

ScoreNet is a small U-Net over 2-channel inputs (noisy image stacked with
the initial reconstruction) predicting the corrupting noise; the score is
recovered from that prediction by a fixed rescaling.  Fvcn maps a
conductivity image to the measurement vector and stands in for the FEM
solver wherever gradients through the forward map are needed.

Both networks operate on normalized tensors; NormStats carries the scales
and travels inside every checkpoint so inference cannot drift from the
statistics the nets were trained under.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError
from .phantoms import Dataset
from .tensor_autodiff import (
    Adam,
    Conv2d,
    Dense,
    GroupNorm,
    NearestUpsample,
    Parameter,
    ReLU,
    SiLU,
    concat,
    split_like,
)


@dataclass
class NormStats:
    """Fixed normalization: images by one scale, voltages per channel."""

    image_scale: float
    voltage_mean: np.ndarray
    voltage_std: np.ndarray

    def __post_init__(self):
        self.voltage_mean = np.asarray(self.voltage_mean, dtype=np.float64)
        self.voltage_std = np.asarray(self.voltage_std, dtype=np.float64)
        if self.image_scale <= 0:
            raise ContractError("image_scale must be > 0")
        if np.any(self.voltage_std <= 0):
            raise ContractError("voltage std entries must be > 0")

    def norm_image(self, img: np.ndarray) -> np.ndarray:
        return img / self.image_scale

    def denorm_image(self, img: np.ndarray) -> np.ndarray:
        return img * self.image_scale

    def norm_voltage(self, v: np.ndarray) -> np.ndarray:
        return (v - self.voltage_mean) / self.voltage_std

    def denorm_voltage(self, v: np.ndarray) -> np.ndarray:
        return v * self.voltage_std + self.voltage_mean

    def to_json_dict(self) -> dict:
        return {
            "image_scale": self.image_scale,
            "voltage_mean": self.voltage_mean.tolist(),
            "voltage_std": self.voltage_std.tolist(),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "NormStats":
        return NormStats(d["image_scale"], d["voltage_mean"], d["voltage_std"])

    @staticmethod
    def from_manifest(manifest: dict) -> "NormStats":
        return NormStats(
            manifest["image_scale"],
            manifest["voltage_mean"],
            manifest["voltage_std"],
        )


def sinusoidal_time_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Classic sin/cos positional features of the timestep index."""
    if dim % 2 != 0:
        raise ContractError("time embedding dimension must be even")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class ResBlock:
    """norm-act-conv twice, timestep features added between, plus skip."""

    def __init__(self, name, ch_in, ch_out, time_hidden, groups, rng, dtype):
        self.ch_in, self.ch_out = ch_in, ch_out
        self.gn1 = GroupNorm(f"{name}.gn1", groups, ch_in, dtype=dtype)
        self.act1 = SiLU()
        self.conv1 = Conv2d(f"{name}.conv1", ch_in, ch_out, 3, pad=1, rng=rng,
                            dtype=dtype)
        self.temb_proj = Dense(f"{name}.temb", time_hidden, ch_out, rng=rng,
                               dtype=dtype)
        self.gn2 = GroupNorm(f"{name}.gn2", groups, ch_out, dtype=dtype)
        self.act2 = SiLU()
        self.conv2 = Conv2d(f"{name}.conv2", ch_out, ch_out, 3, pad=1, rng=rng,
                            dtype=dtype)
        self.skip = (
            Conv2d(f"{name}.skip", ch_in, ch_out, 1, rng=rng, dtype=dtype)
            if ch_in != ch_out
            else None
        )

    def params(self):
        ps = (
            self.gn1.params() + self.conv1.params() + self.temb_proj.params()
            + self.gn2.params() + self.conv2.params()
        )
        if self.skip is not None:
            ps += self.skip.params()
        return ps

    def forward(self, x, temb):
        h = self.conv1.forward(self.act1.forward(self.gn1.forward(x)))
        h = h + self.temb_proj.forward(temb)[:, :, None, None]
        h = self.conv2.forward(self.act2.forward(self.gn2.forward(h)))
        s = self.skip.forward(x) if self.skip is not None else x
        return h + s

    def backward(self, dy):
        d = self.conv2.backward(dy)
        d = self.gn2.backward(self.act2.backward(d))
        dtemb = self.temb_proj.backward(d.sum(axis=(2, 3)))
        d = self.conv1.backward(d)
        dx = self.gn1.backward(self.act1.backward(d))
        dx = dx + (self.skip.backward(dy) if self.skip is not None else dy)
        return dx, dtemb


DEFAULT_SCORE_ARCH = {
    "kind": "score",
    "grid": 64,
    "base_channels": 32,
    "channel_mult": [1, 2],
    "blocks_per_level": 2,
    "time_dim": 64,
    "time_hidden": 128,
    "groups": 8,
}


class ScoreNet:
    """U-shaped noise predictor conditioned on the initial reconstruction."""

    def __init__(self, arch: dict | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        a = dict(DEFAULT_SCORE_ARCH)
        a.update(arch or {})
        a["kind"] = "score"
        self.arch = a
        rng = rng or np.random.default_rng(0)
        self.dtype = dtype
        self.grid = a["grid"]
        chans = [a["base_channels"] * m for m in a["channel_mult"]]
        levels = len(chans)
        blocks = a["blocks_per_level"]
        th = a["time_hidden"]
        g = a["groups"]

        self.time_fc1 = Dense("time.fc1", a["time_dim"], th, rng=rng, dtype=dtype)
        self.time_act = SiLU()
        self.time_fc2 = Dense("time.fc2", th, th, rng=rng, dtype=dtype)

        self.conv_in = Conv2d("in", 2, chans[0], 3, pad=1, rng=rng, dtype=dtype)
        self.enc = []
        self.downs = []
        prev = chans[0]
        for i, ch in enumerate(chans):
            lvl = []
            for b in range(blocks):
                lvl.append(ResBlock(f"enc{i}.b{b}", prev, ch, th, g, rng, dtype))
                prev = ch
            self.enc.append(lvl)
            if i < levels - 1:
                self.downs.append(
                    Conv2d(f"down{i}", ch, ch, 3, stride=2, pad=1, rng=rng,
                           dtype=dtype)
                )
        self.ups = []
        self.dec = []
        for j, i in enumerate(reversed(range(levels - 1))):
            self.ups.append(
                (NearestUpsample(2),
                 Conv2d(f"up{i}", chans[i + 1], chans[i], 3, pad=1, rng=rng,
                        dtype=dtype))
            )
            lvl = []
            prev = 2 * chans[i]
            for b in range(blocks):
                lvl.append(ResBlock(f"dec{i}.b{b}", prev, chans[i], th, g, rng,
                                    dtype))
                prev = chans[i]
            self.dec.append(lvl)
        self.out_gn = GroupNorm("out.gn", g, chans[0], dtype=dtype)
        self.out_act = SiLU()
        self.conv_out = Conv2d("out", chans[0], 1, 3, pad=1, rng=rng, dtype=dtype)
        self._chans = chans

    def params(self) -> list[Parameter]:
        ps = (
            self.time_fc1.params() + self.time_fc2.params()
            + self.conv_in.params()
        )
        for lvl in self.enc:
            for blk in lvl:
                ps += blk.params()
        for d in self.downs:
            ps += d.params()
        for (_, conv), lvl in zip(self.ups, self.dec):
            ps += conv.params()
            for blk in lvl:
                ps += blk.params()
        ps += self.out_gn.params() + self.conv_out.params()
        names = [p.name for p in ps]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names")
        return ps

    def eps(self, sigma_t: np.ndarray, cond: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Predicted corruption noise for a batch of normalized images."""
        if sigma_t.shape != cond.shape:
            raise ContractError("sigma_t and condition shapes differ")
        n, c, h, w = sigma_t.shape
        if c != 1 or h != self.grid or w != self.grid:
            raise ContractError(
                f"expected (n, 1, {self.grid}, {self.grid}) images, got "
                f"{sigma_t.shape}"
            )
        t = np.asarray(t).reshape(-1)
        if t.shape[0] != n:
            raise ContractError("timestep batch size mismatch")
        if np.any(t < 1):
            raise ContractError("timesteps are 1-based")

        emb = sinusoidal_time_embedding(t, self.arch["time_dim"], self.dtype)
        temb = self.time_fc2.forward(
            self.time_act.forward(self.time_fc1.forward(emb))
        )
        self._temb = temb

        x = concat(sigma_t.astype(self.dtype, copy=False),
                   cond.astype(self.dtype, copy=False))
        h = self.conv_in.forward(x)
        levels = len(self.enc)
        skips = []
        for i, lvl in enumerate(self.enc):
            for blk in lvl:
                h = blk.forward(h, temb)
            if i < levels - 1:
                skips.append(h)
                h = self.downs[i].forward(h)
        self._skip_chans = []
        for (up, conv), lvl in zip(self.ups, self.dec):
            h = conv.forward(up.forward(h))
            skip = skips.pop()
            self._skip_chans.append(h.shape[1])
            h = concat(h, skip)
            for blk in lvl:
                h = blk.forward(h, temb)
        y = self.conv_out.forward(self.out_act.forward(self.out_gn.forward(h)))
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        d = self.conv_out.backward(dy)
        d = self.out_gn.backward(self.out_act.backward(d))
        dtemb = np.zeros_like(self._temb)
        dskips = []
        for (up, conv), lvl, sc in zip(
            reversed(self.ups), reversed(self.dec), reversed(self._skip_chans)
        ):
            for blk in reversed(lvl):
                d, dt = blk.backward(d)
                dtemb += dt
            d, dskip = split_like(d, sc)
            dskips.append(dskip)
            d = up.backward(conv.backward(d))
        # reversed decode visits shallow levels first, so dskips[i] lines up
        # with encoder level i
        levels = len(self.enc)
        for i in reversed(range(levels)):
            if i < levels - 1:
                d = self.downs[i].backward(d)
                d = d + dskips[i]
            for blk in reversed(self.enc[i]):
                d, dt = blk.backward(d)
                dtemb += dt
        dx = self.conv_in.backward(d)
        dt = self.time_fc1.backward(
            self.time_act.backward(self.time_fc2.backward(dtemb))
        )
        del dt  # embedding is a fixed function of t; nothing upstream
        return dx


def score_from_eps(eps: np.ndarray, t, schedule) -> np.ndarray:
    """Definitional conversion s = -eps / sqrt(1 - alpha_bar_t)."""
    ab = schedule.alpha_bar[np.asarray(t)]
    denom = np.sqrt(1.0 - ab)
    return -eps / _bcast(denom, eps.ndim)


def eps_from_score(score: np.ndarray, t, schedule) -> np.ndarray:
    ab = schedule.alpha_bar[np.asarray(t)]
    return -score * _bcast(np.sqrt(1.0 - ab), score.ndim)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    v = np.asarray(v)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def score_forward(net: ScoreNet, sigma_t, cond, t, schedule) -> np.ndarray:
    """Score of the perturbed distribution, via the noise prediction."""
    return score_from_eps(net.eps(sigma_t, cond, t), t, schedule)


DEFAULT_FVCN_ARCH = {
    "kind": "fvcn",
    "grid": 64,
    "channels": [16, 32, 64],
    "hidden": 512,
    "n_out": 208,
}


class Fvcn:
    """Conductivity image to measurement vector, small and differentiable."""

    def __init__(self, arch: dict | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        a = dict(DEFAULT_FVCN_ARCH)
        a.update(arch or {})
        a["kind"] = "fvcn"
        self.arch = a
        rng = rng or np.random.default_rng(0)
        self.dtype = dtype
        self.grid = a["grid"]
        chans = a["channels"]
        side = self.grid
        self.convs = []
        self.acts = []
        prev = 1
        for i, ch in enumerate(chans):
            self.convs.append(
                Conv2d(f"conv{i}", prev, ch, 3, stride=2, pad=1, rng=rng,
                       dtype=dtype)
            )
            self.acts.append(ReLU())
            prev = ch
            side = (side + 2 - 3) // 2 + 1
        self.flat_dim = prev * side * side
        self._conv_out_shape = (prev, side, side)
        self.fc1 = Dense("fc1", self.flat_dim, a["hidden"], rng=rng, dtype=dtype)
        self.fc_act = ReLU()
        self.fc2 = Dense("fc2", a["hidden"], a["n_out"], rng=rng, dtype=dtype)

    def params(self) -> list[Parameter]:
        ps = []
        for c in self.convs:
            ps += c.params()
        ps += self.fc1.params() + self.fc2.params()
        return ps

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.grid, self.grid):
            raise ContractError(
                f"expected (n, 1, {self.grid}, {self.grid}) input, got {x.shape}"
            )
        h = x.astype(self.dtype, copy=False)
        for conv, act in zip(self.convs, self.acts):
            h = act.forward(conv.forward(h))
        self._h_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        return self.fc2.forward(self.fc_act.forward(self.fc1.forward(h)))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        d = self.fc1.backward(self.fc_act.backward(self.fc2.backward(dy)))
        d = d.reshape(self._h_shape)
        for conv, act in zip(reversed(self.convs), reversed(self.acts)):
            d = conv.backward(act.backward(d))
        return d


def fvcn_forward(net: Fvcn, image: np.ndarray) -> np.ndarray:
    """Normalized voltages for one normalized image or a batch."""
    single = image.ndim == 2
    if single:
        image = image[None, None]
    elif image.ndim == 3:
        image = image[:, None]
    out = net.forward(image)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainOpts:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0
    epochs: int | None = None  # alternative to steps
    val_fraction: float = 0.1
    eval_every: int = 100
    patience: int = 10

    def resolve_steps(self, n_records: int) -> int:
        if self.epochs is not None:
            return self.epochs * max(1, int(np.ceil(n_records / self.batch)))
        return self.steps


@dataclass
class TrainResult:
    model: object
    norm: NormStats
    losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    train_mse: float | None = None  # fvcn only: final objective on the fitted split
    val_mse: float | None = None


def _dataset_tensors(dataset: Dataset, norm: NormStats):
    imgs = norm.norm_image(
        dataset.sigma_true.astype(np.float32)
    )[:, None]
    cond = norm.norm_image(dataset.initial.astype(np.float32))[:, None]
    volts = norm.norm_voltage(dataset.voltage.astype(np.float64)).astype(
        np.float32
    )
    return imgs, cond, volts


def norm_stats_from_dataset(dataset: Dataset) -> NormStats:
    return NormStats.from_manifest(dataset.manifest)


def train_score(dataset: Dataset, schedule, opts: TrainOpts | None = None,
                arch: dict | None = None) -> TrainResult:
    """Denoising training: predict the noise that corrupted the image.

    Draws (record, timestep, noise) per sample, forms the closed-form
    noisy image, and regresses the prediction onto the drawn noise with a
    mean-squared objective.
    """
    opts = opts or TrainOpts()
    norm = norm_stats_from_dataset(dataset)
    imgs, cond, _ = _dataset_tensors(dataset, norm)
    n, _, g, _ = imgs.shape

    ss = np.random.SeedSequence(opts.seed)
    rng_init, rng_data = [np.random.default_rng(s) for s in ss.spawn(2)]
    a = dict(arch or {})
    a.setdefault("grid", g)
    model = ScoreNet(a, rng=rng_init)
    optim = Adam(model.params(), lr=opts.lr)
    steps = opts.resolve_steps(n)

    result = TrainResult(model=model, norm=norm)
    ab = schedule.alpha_bar
    for step in range(steps):
        idx = rng_data.integers(0, n, size=opts.batch)
        t = rng_data.integers(1, schedule.T + 1, size=opts.batch)
        eps = rng_data.standard_normal(
            (opts.batch, 1, g, g), dtype=np.float32
        )
        a_t = ab[t].astype(np.float32)[:, None, None, None]
        x_t = np.sqrt(a_t) * imgs[idx] + np.sqrt(1.0 - a_t) * eps
        pred = model.eps(x_t, cond[idx], t)
        diff = pred - eps
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        if not np.isfinite(loss):
            raise NumericalError(f"score training loss diverged at step {step}")
        result.losses.append(loss)
        optim.zero_grad()
        model.backward((2.0 / diff.size) * diff)
        optim.step()
    return result


def fvcn_mse(net: Fvcn, images: np.ndarray, volts: np.ndarray) -> float:
    """Per-entry mean squared error on normalized tensors."""
    pred = net.forward(images)
    return float(np.mean((pred.astype(np.float64) - volts) ** 2))


def train_fvcn(dataset: Dataset, opts: TrainOpts | None = None,
               arch: dict | None = None) -> TrainResult:
    """MSE regression from true conductivity images to voltage frames.

    Holds out a validation slice and stops early when its loss stops
    improving; the best-validation parameters are restored at the end.
    """
    opts = opts or TrainOpts(batch=16)
    norm = norm_stats_from_dataset(dataset)
    imgs, _, volts = _dataset_tensors(dataset, norm)
    n, _, g, _ = imgs.shape

    ss = np.random.SeedSequence(opts.seed)
    rng_init, rng_data = [np.random.default_rng(s) for s in ss.spawn(2)]
    a = dict(arch or {})
    a.setdefault("grid", g)
    a.setdefault("n_out", volts.shape[1])
    model = Fvcn(a, rng=rng_init)
    optim = Adam(model.params(), lr=opts.lr)
    steps = opts.resolve_steps(n)

    n_val = min(max(1, int(round(n * opts.val_fraction))), n - 1)
    perm = rng_data.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    result = TrainResult(model=model, norm=norm)
    best_val = np.inf
    best_params = None
    stale = 0
    for step in range(steps):
        idx = train_idx[rng_data.integers(0, len(train_idx), size=opts.batch)]
        pred = model.forward(imgs[idx])
        diff = pred - volts[idx]
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        if not np.isfinite(loss):
            raise NumericalError(f"fvcn training loss diverged at step {step}")
        result.losses.append(loss)
        optim.zero_grad()
        model.backward((2.0 / diff.size) * diff)
        optim.step()

        if (step + 1) % opts.eval_every == 0 or step == steps - 1:
            val = fvcn_mse(model, imgs[val_idx], volts[val_idx])
            result.val_losses.append(val)
            if val < best_val:
                best_val = val
                best_params = [p.value.copy() for p in model.params()]
                stale = 0
            else:
                stale += 1
                if stale >= opts.patience:
                    break
    if best_params is not None:
        for p, v in zip(model.params(), best_params):
            p.value[...] = v
    result.train_mse = fvcn_mse(model, imgs[train_idx], volts[train_idx])
    result.val_mse = fvcn_mse(model, imgs[val_idx], volts[val_idx])
    return result
