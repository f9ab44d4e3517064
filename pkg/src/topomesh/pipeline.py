"""Progressive reconstruction pipeline and staged training.

A reconstruction runs feature -> deform -> prune -> deform -> prune ->
boundary refinement.  Training follows the same order one subnet at a
time with everything else frozen, then fine-tunes end to end.  Pruning is
discrete: masks are recomputed on current values each forward pass and
gradients flow only through the surviving vertex positions, never through
the mask itself.
"""

import json
import logging
from dataclasses import dataclass, field, fields
from typing import Optional, Union

import numpy as np

from .autodiff import (
    MlpParams,
    OptimState,
    Value,
    WrappedMlp,
    gather,
    optimizer_step,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import (
    LossWeights,
    boundary_energy,
    chamfer,
    error_regression_loss,
    edge_loss,
    nearest_indices,
    normal_loss,
    smoothness_loss,
    total_loss,
)
from .mesh import (
    EmptyMeshError,
    Mesh,
    PointCloud,
    extract_boundary_loops,
    make_icosphere,
    prune_faces,
    sample_on_faces,
    sample_per_face,
)
from .networks import (
    ShapeFeature,
    deform,
    deform_positions,
    encode_pointcloud,
    encode_points,
    error_predictions,
    estimate_errors,
    make_deform_net,
    make_encoder,
    make_error_net,
    make_refine_net,
    prune_by_threshold,
    refine_boundary,
    refine_positions,
)

logger = logging.getLogger(__name__)

STAGE_ORDER = ("deform1", "error1", "deform2", "error2", "refine")
FINETUNE = "finetune"


class TrainingError(RuntimeError):
    """Training could not proceed (bad stage order, empty prune, bad loss)."""


@dataclass
class StageConfig:
    """Per-subnet pruning threshold and sampling density."""

    tau: float
    samples_per_face: int = 10
    weights_override: Optional[LossWeights] = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.samples_per_face < 1:
            raise ValueError("samples_per_face must be >= 1")


@dataclass
class TrainConfig:
    """Training schedule plus architecture sizing.

    The schedule fields mirror the published recipe (300 epochs, batch 16,
    learning rate 1e-3 dropped to 1e-4 after epoch 200); the defaults here
    are desk-scale so the whole run fits in minutes.  Architecture fields
    default to the full-size network and are meant to be shrunk together
    for quick experiments.
    """

    epochs_per_stage: int = 100
    finetune_epochs: int = 50
    batch_size: int = 8
    lr_initial: float = 1e-3
    lr_drop_to: float = 1e-4
    lr_drop_epoch: int = 60
    seed: int = 0
    cd_samples: int = 2500
    encode_points: int = 2500
    weights: LossWeights = field(default_factory=LossWeights)
    template_level: int = 4
    feature_dim: int = 1024
    deform_hidden: tuple = (1024, 512, 256, 128)
    encoder_hidden: tuple = (64, 128)
    taus: tuple = (0.1, 0.05)
    samples_per_face: int = 10
    pruning_enabled: bool = True

    def __post_init__(self):
        for name in (
            "batch_size",
            "cd_samples",
            "encode_points",
            "feature_dim",
            "samples_per_face",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs_per_stage", "finetune_epochs", "lr_drop_epoch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if len(self.taus) != 2:
            raise ValueError("taus must give the two stage thresholds")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "weights" in raw:
            raw["weights"] = LossWeights(**raw["weights"])
        for name in ("deform_hidden", "encoder_hidden", "taus"):
            if name in raw:
                raw[name] = tuple(raw[name])
        return cls(**raw)

    def to_json(self, path) -> None:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, LossWeights):
                value = dict(value.__dict__)
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)
            fh.write("\n")


_NET_NAMES = ("encoder", "deform1", "error1", "deform2", "error2", "refine")
_ACT_CODES = {"relu": 0.0, "tanh": 1.0, "none": 2.0}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass
class Model:
    """All learned parameters plus the stage configuration."""

    encoder: MlpParams
    deform1: MlpParams
    error1: MlpParams
    deform2: MlpParams
    error2: MlpParams
    refine: MlpParams
    stage1: StageConfig
    stage2: StageConfig
    template_level: int = 4
    feature_dim: int = 1024
    pruning_enabled: bool = True
    trained: list = field(default_factory=list)

    def net(self, name: str) -> MlpParams:
        if name not in _NET_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def enabled_stages(self) -> tuple:
        if self.pruning_enabled:
            return STAGE_ORDER
        return ("deform1", "deform2")

    def save(self, path) -> None:
        arrays = {}
        for name in _NET_NAMES:
            net = self.net(name)
            arrays.update(dict(net.named_arrays(name)))
            arrays[f"{name}.activations"] = np.array(
                [_ACT_CODES[layer.activation] for layer in net.layers]
            )
        arrays["config.taus"] = np.array([self.stage1.tau, self.stage2.tau])
        arrays["config.samples_per_face"] = np.array(
            [self.stage1.samples_per_face, self.stage2.samples_per_face],
            dtype=np.float64,
        )
        arrays["config.template_level"] = np.array(float(self.template_level))
        arrays["config.feature_dim"] = np.array(float(self.feature_dim))
        arrays["config.pruning_enabled"] = np.array(float(self.pruning_enabled))
        all_stages = STAGE_ORDER + (FINETUNE,)
        arrays["config.trained"] = np.array(
            [1.0 if s in self.trained else 0.0 for s in all_stages]
        )
        save_checkpoint(arrays, path)

    @classmethod
    def load(cls, path) -> "Model":
        from .autodiff import Layer

        arrays = load_checkpoint(path)
        nets = {}
        for name in _NET_NAMES:
            acts = arrays[f"{name}.activations"]
            layers = []
            for i, code in enumerate(acts):
                layers.append(
                    Layer(
                        arrays[f"{name}.layer{i}.weight"],
                        arrays[f"{name}.layer{i}.bias"],
                        _ACT_NAMES[float(code)],
                    )
                )
            nets[name] = MlpParams(layers)
        taus = arrays["config.taus"]
        spf = arrays["config.samples_per_face"]
        all_stages = STAGE_ORDER + (FINETUNE,)
        trained_mask = arrays["config.trained"]
        return cls(
            stage1=StageConfig(float(taus[0]), int(spf[0])),
            stage2=StageConfig(float(taus[1]), int(spf[1])),
            template_level=int(float(arrays["config.template_level"])),
            feature_dim=int(float(arrays["config.feature_dim"])),
            pruning_enabled=bool(float(arrays["config.pruning_enabled"])),
            trained=[s for s, on in zip(all_stages, trained_mask) if on > 0.5],
            **nets,
        )


def make_model(config: TrainConfig) -> Model:
    """Fresh model with per-component seeded initialization."""
    seeds = {name: np.random.default_rng([config.seed, i]) for i, name in enumerate(_NET_NAMES)}
    return Model(
        encoder=make_encoder(config.feature_dim, seeds["encoder"], config.encoder_hidden),
        deform1=make_deform_net(config.feature_dim, seeds["deform1"], config.deform_hidden),
        error1=make_error_net(config.feature_dim, seeds["error1"], config.deform_hidden),
        deform2=make_deform_net(config.feature_dim, seeds["deform2"], config.deform_hidden),
        error2=make_error_net(config.feature_dim, seeds["error2"], config.deform_hidden),
        refine=make_refine_net(config.feature_dim, seeds["refine"], config.deform_hidden),
        stage1=StageConfig(config.taus[0], config.samples_per_face),
        stage2=StageConfig(config.taus[1], config.samples_per_face),
        template_level=config.template_level,
        feature_dim=config.feature_dim,
        pruning_enabled=config.pruning_enabled,
    )


# -- reconstruction ----------------------------------------------------------------


@dataclass
class ReconstructionResult:
    """Final mesh plus every intermediate, for inspection and dumping."""

    feature: ShapeFeature
    stages: list
    final: Mesh
    failed_stage: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.failed_stage is None


def reconstruct(
    inp: Union[PointCloud, ShapeFeature, np.ndarray],
    model: Model,
    template: Optional[Mesh] = None,
    seed: int = 0,
) -> ReconstructionResult:
    """Run the full forward pipeline on a cloud or a precomputed feature.

    A pruning stage that would remove every face marks the result failed
    and returns the last valid mesh as ``final``.
    """
    if template is None:
        template = make_icosphere(model.template_level)
    if isinstance(inp, PointCloud):
        feature = encode_pointcloud(inp, model.encoder)
    elif isinstance(inp, ShapeFeature):
        feature = inp
    else:
        feature = ShapeFeature(np.asarray(inp, dtype=np.float64))
    if len(feature) != model.feature_dim:
        raise ValueError(
            f"feature length {len(feature)} does not match model feature_dim {model.feature_dim}"
        )

    stages = []
    mesh = deform(template, feature, model.deform1)
    stages.append(("deform1", mesh))

    if model.pruning_enabled:
        errors1 = estimate_errors(
            mesh, feature, model.error1, model.stage1.samples_per_face, seed=_seed_for(seed, 1)
        )
        try:
            mesh, _ = prune_by_threshold(mesh, errors1, model.stage1.tau)
        except EmptyMeshError:
            logger.error("stage-1 pruning removed every face")
            return ReconstructionResult(feature, stages, stages[-1][1], failed_stage="prune1")
        stages.append(("prune1", mesh))

    mesh = deform(mesh, feature, model.deform2)
    stages.append(("deform2", mesh))

    if model.pruning_enabled:
        errors2 = estimate_errors(
            mesh, feature, model.error2, model.stage2.samples_per_face, seed=_seed_for(seed, 2)
        )
        try:
            mesh, _ = prune_by_threshold(mesh, errors2, model.stage2.tau)
        except EmptyMeshError:
            logger.error("stage-2 pruning removed every face")
            return ReconstructionResult(feature, stages, stages[-1][1], failed_stage="prune2")
        stages.append(("prune2", mesh))

        loops = extract_boundary_loops(mesh)
        mesh = refine_boundary(mesh, loops, feature, model.refine)
        stages.append(("refine", mesh))

    return ReconstructionResult(feature, stages, mesh)


def _seed_for(seed: int, stage: int) -> int:
    return int(np.random.default_rng([seed, stage]).integers(0, 2**31 - 1))


def ground_truth_errors(samples, gt) -> np.ndarray:
    """Unsquared nearest-neighbor distances from samples to the gt cloud."""
    pts = samples.points if isinstance(samples, PointCloud) else np.asarray(samples)
    gt_pts = gt.points if isinstance(gt, PointCloud) else np.asarray(gt)
    idx = nearest_indices(pts, gt_pts)
    return np.linalg.norm(pts - gt_pts[idx], axis=1)


# -- training -----------------------------------------------------------------------


def _item_rng(config: TrainConfig, stage_idx: int, epoch: int, item: int):
    return np.random.default_rng([config.seed, stage_idx, epoch, item])


def _sampled_positions(positions: Value, faces: np.ndarray, count: int, rng):
    """Differentiable surface samples of the current geometry.

    Face choice and barycentric weights come from the present coordinates
    and stay constant within the step; the returned positions are the
    barycentric combinations of the (moving) vertex Values.
    """
    pts, face_idx, bary = sample_on_faces(positions.data, faces, count, rng)
    tri = faces[face_idx]
    combined = (
        bary[:, 0:1] * gather(positions, tri[:, 0])
        + bary[:, 1:2] * gather(positions, tri[:, 1])
        + bary[:, 2:3] * gather(positions, tri[:, 2])
    )
    return combined, PointCloud(points=pts, source_face=face_idx, bary=bary)


def _gt_subset(item, count: int, rng) -> np.ndarray:
    pts = item.gt_cloud.points
    if len(pts) <= count:
        return pts
    return pts[rng.choice(len(pts), size=count, replace=False)]


def _encoder_input(item, config: TrainConfig, rng) -> np.ndarray:
    pts = item.encoder_cloud.points
    if len(pts) <= config.encode_points:
        return pts
    return pts[rng.choice(len(pts), size=config.encode_points, replace=False)]


def _feature_for_item(model: Model, item, config: TrainConfig, rng, wrapped=None):
    """Feature Value; differentiable when a wrapped encoder is given."""
    pts = _encoder_input(item, config, rng)
    if wrapped is not None:
        return encode_points(Value(pts), wrapped)
    return Value(encode_points(pts, model.encoder).data)


def _deform_regularized(positions, topology, samples_cloud, sample_values, gt_sub, item, weights):
    comps = {
        "cd": chamfer(sample_values, Value(gt_sub)),
        "normal": normal_loss(positions, topology.faces, samples_cloud, item.gt_cloud),
        "smooth": smoothness_loss(positions, topology),
        "edge": edge_loss(positions, topology),
    }
    return total_loss(comps, weights), comps


def _prune_graph(positions: Value, topology: Mesh, mask: np.ndarray):
    """Apply a discrete prune while keeping positions differentiable."""
    pruned, remap = prune_faces(topology, mask)
    kept_old = np.flatnonzero(remap >= 0)
    return gather(positions, kept_old), pruned


def _clamped_face_means(raw: Value, n_faces: int, spf: int) -> np.ndarray:
    per_face = raw.data.reshape(n_faces, spf).mean(axis=1)
    return np.maximum(per_face, 0.0)


def _item_loss(model: Model, item, config: TrainConfig, stage: str, rng, wrapped: dict):
    """Build the loss graph for one dataset item at one training stage.

    ``wrapped`` maps net names to WrappedMlp instances for the parameters
    being trained this stage; everything else is evaluated frozen.
    """
    weights = _stage_weights(model, config, stage)
    template = _template_for(model)
    faces = template.faces

    def net(name):
        return wrapped.get(name, model.net(name))

    feature = _feature_for_item(model, item, config, rng, wrapped.get("encoder"))

    if stage == "deform1":
        pos1 = deform_positions(Value(template.vertices), feature, net("deform1"))
        sample_values, samples_cloud = _sampled_positions(pos1, faces, config.cd_samples, rng)
        gt_sub = _gt_subset(item, config.cd_samples, rng)
        return _deform_regularized(pos1, template, samples_cloud, sample_values, gt_sub, item, weights)

    # later stages run stage 1 frozen
    pos1 = deform_positions(Value(template.vertices), feature, net("deform1"))

    if stage == "error1":
        pts, _, _ = sample_per_face(pos1.data, faces, model.stage1.samples_per_face, rng)
        raw = error_predictions(Value(pts), feature, net("error1"))
        target = ground_truth_errors(pts, item.gt_cloud)
        loss = error_regression_loss(raw, target)
        return total_loss({"error": loss}, weights), {"error": loss}

    if model.pruning_enabled:
        pts1, _, _ = sample_per_face(pos1.data, faces, model.stage1.samples_per_face, rng)
        raw1 = error_predictions(Value(pts1), feature, net("error1"))
        mask1 = _clamped_face_means(raw1, len(faces), model.stage1.samples_per_face) > model.stage1.tau
        if mask1.all():
            raise TrainingError(f"stage-1 pruning removed every face of item {item.shape_id}")
        pos1p, topo1 = _prune_graph(pos1, Mesh(pos1.data, faces), mask1)
    else:
        raw1 = None
        pos1p, topo1 = pos1, Mesh(pos1.data, faces)

    pos2 = deform_positions(pos1p, feature, net("deform2"))

    if stage == "deform2":
        sample_values, samples_cloud = _sampled_positions(pos2, topo1.faces, config.cd_samples, rng)
        gt_sub = _gt_subset(item, config.cd_samples, rng)
        return _deform_regularized(pos2, topo1, samples_cloud, sample_values, gt_sub, item, weights)

    if stage == "error2":
        pts, _, _ = sample_per_face(pos2.data, topo1.faces, model.stage2.samples_per_face, rng)
        raw = error_predictions(Value(pts), feature, net("error2"))
        target = ground_truth_errors(pts, item.gt_cloud)
        loss = error_regression_loss(raw, target)
        return total_loss({"error": loss}, weights), {"error": loss}

    pts2, _, _ = sample_per_face(pos2.data, topo1.faces, model.stage2.samples_per_face, rng)
    raw2 = error_predictions(Value(pts2), feature, net("error2"))
    mask2 = _clamped_face_means(raw2, len(topo1.faces), model.stage2.samples_per_face) > model.stage2.tau
    if mask2.all():
        raise TrainingError(f"stage-2 pruning removed every face of item {item.shape_id}")
    pos2p, topo2 = _prune_graph(pos2, Mesh(pos2.data, topo1.faces), mask2)
    loops = extract_boundary_loops(topo2)
    refined = refine_positions(pos2p, loops, feature, net("refine"))

    if stage == "refine":
        sample_values, _ = _sampled_positions(refined, topo2.faces, config.cd_samples, rng)
        gt_sub = _gt_subset(item, config.cd_samples, rng)
        comps = {
            "cd": chamfer(sample_values, Value(gt_sub)),
            "boundary": boundary_energy(refined, loops),
        }
        return total_loss(comps, weights), comps

    if stage == FINETUNE:
        sample_values, samples_cloud = _sampled_positions(refined, topo2.faces, config.cd_samples, rng)
        gt_sub = _gt_subset(item, config.cd_samples, rng)
        err = error_regression_loss(raw1, ground_truth_errors(pts1, item.gt_cloud))
        err = err + error_regression_loss(raw2, ground_truth_errors(pts2, item.gt_cloud))
        final_mesh = Mesh(refined.data, topo2.faces)
        comps = {
            "cd": chamfer(sample_values, Value(gt_sub)),
            "error": err,
            "boundary": boundary_energy(refined, loops),
            "normal": normal_loss(refined, topo2.faces, samples_cloud, item.gt_cloud),
            "smooth": smoothness_loss(refined, final_mesh),
            "edge": edge_loss(refined, final_mesh),
        }
        return total_loss(comps, weights), comps

    raise TrainingError(f"unknown stage {stage!r}")


def _finetune_ablation_loss(model, item, config, rng, wrapped):
    """Fine-tune objective with pruning disabled: two deforms, CD + regularizers."""
    weights = config.weights
    template = _template_for(model)

    def net(name):
        return wrapped.get(name, model.net(name))

    feature = _feature_for_item(model, item, config, rng, wrapped.get("encoder"))
    pos1 = deform_positions(Value(template.vertices), feature, net("deform1"))
    pos2 = deform_positions(pos1, feature, net("deform2"))
    sample_values, samples_cloud = _sampled_positions(pos2, template.faces, config.cd_samples, rng)
    gt_sub = _gt_subset(item, config.cd_samples, rng)
    return _deform_regularized(pos2, template, samples_cloud, sample_values, gt_sub, item, weights)


_TEMPLATE_CACHE = {}


def _template_for(model: Model) -> Mesh:
    if model.template_level not in _TEMPLATE_CACHE:
        _TEMPLATE_CACHE[model.template_level] = make_icosphere(model.template_level)
    return _TEMPLATE_CACHE[model.template_level]


def _stage_weights(model: Model, config: TrainConfig, stage: str) -> LossWeights:
    if stage in ("deform1", "error1") and model.stage1.weights_override is not None:
        return model.stage1.weights_override
    if stage in ("deform2", "error2") and model.stage2.weights_override is not None:
        return model.stage2.weights_override
    return config.weights


_TRAINABLE = {
    "deform1": ("encoder", "deform1"),
    "error1": ("error1",),
    "deform2": ("deform2",),
    "error2": ("error2",),
    "refine": ("refine",),
    FINETUNE: _NET_NAMES,
}


def _check_stage_order(model: Model, stage: str):
    enabled = model.enabled_stages()
    if stage == FINETUNE:
        missing = [s for s in enabled if s not in model.trained]
        if missing:
            raise TrainingError(f"fine-tune requires trained stages, missing {missing}")
        return
    if stage not in enabled:
        raise TrainingError(f"stage {stage!r} is not part of this model's pipeline")
    earlier = enabled[: enabled.index(stage)]
    missing = [s for s in earlier if s not in model.trained]
    if missing:
        raise TrainingError(f"stage {stage!r} requires earlier stages, missing {missing}")


def train_stage(stage: str, model: Model, dataset: list, config: TrainConfig):
    """Train one subnet with the rest frozen.

    Returns (model, curves); ``curves`` is one dict per epoch with the mean
    loss components across the dataset.  The model is updated in place and
    the stage is appended to ``model.trained``.
    """
    _check_stage_order(model, stage)
    epochs = config.finetune_epochs if stage == FINETUNE else config.epochs_per_stage
    stage_idx = (STAGE_ORDER + (FINETUNE,)).index(stage)
    trainable = [n for n in _TRAINABLE[stage]]
    if not model.pruning_enabled and stage == FINETUNE:
        trainable = ["encoder", "deform1", "deform2"]

    state = OptimState(lr=config.lr_initial)
    params = {}
    for name in trainable:
        for pname, arr in model.net(name).named_arrays(name):
            params[pname] = arr

    curves = []
    if not dataset:
        raise TrainingError("empty dataset")
    for epoch in range(epochs):
        state.lr = config.lr_initial if epoch < config.lr_drop_epoch else config.lr_drop_to
        sums = {}
        count = 0
        for start in range(0, len(dataset), config.batch_size):
            batch = dataset[start : start + config.batch_size]
            wrapped = {name: WrappedMlp(model.net(name), prefix=name) for name in trainable}
            batch_total = None
            for offset, item in enumerate(batch):
                rng = _item_rng(config, stage_idx, epoch, start + offset)
                if not model.pruning_enabled and stage == FINETUNE:
                    loss, comps = _finetune_ablation_loss(model, item, config, rng, wrapped)
                else:
                    loss, comps = _item_loss(model, item, config, stage, rng, wrapped)
                batch_total = loss if batch_total is None else batch_total + loss
                for key, val in comps.items():
                    sums[key] = sums.get(key, 0.0) + float(val.data)
                sums["total"] = sums.get("total", 0.0) + float(loss.data)
                count += 1
            batch_mean = batch_total * (1.0 / len(batch))
            if not np.isfinite(batch_mean.data):
                raise TrainingError(
                    f"non-finite loss at stage {stage!r}, epoch {epoch}, item {start}"
                )
            batch_mean.backward()
            grads = {}
            for w in wrapped.values():
                grads.update(dict(w.named_grads()))
            optimizer_step(params, grads, state)
        row = {"epoch": epoch, "stage": stage}
        for key in ("cd", "error", "boundary", "normal", "smooth", "edge", "total"):
            row[key] = sums.get(key, 0.0) / max(count, 1)
        curves.append(row)
        logger.info("stage %s epoch %d total %.6f", stage, epoch, row["total"])
    if stage not in model.trained:
        model.trained.append(stage)
    return model, curves


def finetune(model: Model, dataset: list, config: TrainConfig):
    """Joint end-to-end pass over every parameter with the full objective."""
    return train_stage(FINETUNE, model, dataset, config)


def train_full(model: Model, dataset: list, config: TrainConfig):
    """All enabled stages in order, then fine-tuning; returns all curves."""
    curves = []
    for stage in model.enabled_stages():
        _, rows = train_stage(stage, model, dataset, config)
        curves.extend(rows)
    if config.finetune_epochs > 0:
        _, rows = finetune(model, dataset, config)
        curves.extend(rows)
    return model, curves
