"""End-to-end building blocks shared by the command line, scripts and acceptance suite."""

from __future__ import annotations

import gc
from dataclasses import dataclass

import numpy as np

from .classify import (
    N_LAYER1,
    N_LAYER2,
    VIEWPOINTS,
    DecisionForest,
    ForestBank,
    ForestParams,
    HsvRange,
    classify_pixels,
    train_forest,
)
from .config import RunConfig
from .depth import DepthFrame, Intrinsics
from .energy import EnergyWeights, TermSwitches
from .evaluation import AnnotationSet
from .kinematics import KinematicModel, kinematic_model_from_document, load_model_document
from .optimizer import TrackerConfig
from .scene import (
    OBJECT,
    SceneModel,
    box_corners,
    box_grid,
    fit_object_gaussians,
    hand_scene_model,
    load_obj,
    voxelize_mesh,
)
from .synth import (
    SynthConfig,
    SyntheticSequence,
    constant_trajectory,
    generate_sequence,
    generate_training_set,
    grasp_trajectory,
    occlusion_trajectory,
)

TRAJECTORIES = {"constant": constant_trajectory, "grasp": grasp_trajectory, "occlusion": occlusion_trajectory}


def build_models(cfg: RunConfig | None = None) -> tuple[SceneModel, KinematicModel]:
    cfg = RunConfig() if cfg is None else cfg
    doc = load_model_document(cfg.paths.model)
    kin = kinematic_model_from_document(doc)
    oc = cfg.object
    if oc.mesh:
        mesh = load_obj(oc.mesh)
        geometry = voxelize_mesh(mesh, 2.0)
        v = mesh.vertices
        landmarks = v[:3] if len(v) >= 3 else None
    else:
        geometry = box_grid(oc.box_size)
        landmarks = box_corners(oc.box_size)
    mixture = fit_object_gaussians(geometry, oc.gaussians, seed=oc.seed)
    return hand_scene_model(kin, doc, mixture, landmarks), kin


def intrinsics_from(cfg: RunConfig) -> Intrinsics:
    s = cfg.synth
    return Intrinsics(s.fx, s.fy, (s.width - 1) / 2.0, (s.height - 1) / 2.0, s.width, s.height)


def tracker_config(cfg: RunConfig) -> TrackerConfig:
    w, sw, op, h = cfg.weights, cfg.switches, cfg.optimizer, cfg.hsv
    return TrackerConfig(
        weights=EnergyWeights(w.w_p, w.w_t, w.w_s, w.w_c, w.w_o, w.lam, w.r_max),
        switches=TermSwitches(sw.e_a, sw.e_s, sw.e_p, sw.e_t, sw.e_c, sw.e_o),
        iterations=op.iterations, initial_step=op.initial_step, eps_cluster=op.eps_cluster,
        release_factor=op.release_factor,
        object_hsv=HsvRange(tuple(h.hue), tuple(h.saturation), tuple(h.value)),
        parallel=op.threads > 1,
    )


def make_sequence(cfg: RunConfig, scene: SceneModel, kin: KinematicModel) -> SyntheticSequence:
    s = cfg.synth
    traj = TRAJECTORIES[s.trajectory](scene, kin)
    return generate_sequence(traj, scene, kin, s.length, intrinsics_from(cfg),
                             seed=cfg.seed if s.noise else None, include_arm=s.include_arm)


def sequence_annotations(seq: SyntheticSequence) -> AnnotationSet:
    return AnnotationSet(np.arange(len(seq)), seq.landmarks, seq.visible)


# --- forests ------------------------------------------------------------------------------


@dataclass
class ForestReport:
    layer1_accuracy: float
    layer1_baseline: float
    layer2_accuracy: dict
    layer2_baseline: dict
    combined_accuracy: float
    combined_baseline: float

    def as_dict(self) -> dict:
        return {"layer1_accuracy": self.layer1_accuracy, "layer1_majority_baseline": self.layer1_baseline,
                "layer2_accuracy": self.layer2_accuracy, "layer2_majority_baseline": self.layer2_baseline,
                "combined_accuracy": self.combined_accuracy,
                "combined_majority_baseline": self.combined_baseline}


def _accuracy(forest: DecisionForest, ts) -> tuple[float, float]:
    hits = total = 0
    counts = np.zeros(forest.n_classes, dtype=np.int64)
    for depth, lab in zip(ts.depth, ts.labels):
        vv, uu = np.nonzero((lab != 255) & (depth > 0))
        if len(vv) == 0:
            continue
        y = lab[vv, uu]
        p = forest.predict_proba(depth.astype(np.float64), uu, vv, ts.focal)
        hits += int((np.argmax(p, axis=1) == y).sum())
        total += len(y)
        counts += np.bincount(y, minlength=forest.n_classes)
    return hits / max(total, 1), counts.max() / max(total, 1)


def cascade_accuracy(bank: ForestBank, frames, viewpoints, intr: Intrinsics) -> tuple[float, float]:
    """Two-layer argmax against the 8-class ground truth on non-object foreground pixels."""
    hits = total = 0
    counts = np.zeros(8, dtype=np.int64)
    for depth, truth, vp in zip(frames.depth, frames.ground_truth(), viewpoints):
        frame = DepthFrame(depth.astype(np.float64), intr)
        hist = classify_pixels(bank.layer1, bank.for_viewpoint(vp), frame)
        fg = (depth > 0) & (truth != OBJECT)
        y = truth[fg]
        hits += int((np.argmax(hist, axis=2)[fg] == y).sum())
        total += len(y)
        counts += np.bincount(y, minlength=8)
    return hits / max(total, 1), counts.max() / max(total, 1)


def forest_params(cfg: RunConfig, layer: int) -> ForestParams:
    f = cfg.forest
    return ForestParams(trees=3, pixels_per_image=f.pixels_per_image, candidate_offsets=f.candidate_offsets,
                        thresholds=f.thresholds,
                        max_depth=f.layer1_max_depth if layer == 1 else f.layer2_max_depth,
                        min_gain=f.min_gain, offset_range=f.offset_range)


def train_forest_bank(cfg: RunConfig, scene: SceneModel, kin: KinematicModel, log=print):
    """Train the layer-1 forest and one layer-2 forest per viewpoint on synthetic frames.

    Returns the bank and a held-out accuracy report.
    """
    f = cfg.forest
    synth_cfg = SynthConfig(intrinsics=intrinsics_from(cfg))
    seed = cfg.seed
    held = generate_training_set(f.held_out_images, seed + 1_000_003, scene, kin, synth_cfg)

    data = generate_training_set(f.layer1_images, seed, scene, kin, synth_cfg)
    log(f"layer 1: {len(data)} images, rejection rate {data.rejection_rate:.3f}")
    layer1 = train_forest(data.layer1(), N_LAYER1, forest_params(cfg, 1), seed=seed, layer=1)
    del data
    gc.collect()
    acc1, base1 = _accuracy(layer1, held.layer1())
    log(f"layer 1 held-out accuracy {acc1:.4f} (majority {base1:.4f})")

    layer2, acc2, base2 = {}, {}, {}
    for k, vp in enumerate(VIEWPOINTS):
        data = generate_training_set(f.layer2_images, seed + 10_007 * (k + 1), scene, kin, synth_cfg, viewpoint=vp)
        layer2[vp] = train_forest(data.layer2(), N_LAYER2, forest_params(cfg, 2), seed=seed + k + 1, layer=2,
                                  viewpoint=vp)
        del data
        gc.collect()
        sel = [i for i, v in enumerate(held.viewpoints) if v == vp]
        sub = held.layer2()
        sub.depth, sub.labels = sub.depth[sel], sub.labels[sel]
        acc2[vp], base2[vp] = _accuracy(layer2[vp], sub)
        log(f"layer 2 {vp}: held-out accuracy {acc2[vp]:.4f} (majority {base2[vp]:.4f})")
    bank = ForestBank(layer1, layer2)
    accc, basec = cascade_accuracy(bank, held, held.viewpoints, synth_cfg.intrinsics)
    log(f"cascade held-out accuracy {accc:.4f} (majority {basec:.4f})")
    return bank, ForestReport(acc1, base1, acc2, base2, accc, basec)


def sequence_frames(seq: SyntheticSequence):
    for k, fr in enumerate(seq.frames):
        yield fr.frames(seq.intrinsics, float(k))

