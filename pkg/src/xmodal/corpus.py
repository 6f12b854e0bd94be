"""Procedural tabletop corpus: vocabulary, action patterns, trajectories, frames.

A NICO-like arm manipulates one of two coloured cubes.  Joint trajectories
are keyframe sequences smoothed with minimum-jerk profiles; frames are
flat-shaded rasterisations driven by the joint values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import itertools
import json
import os
from pathlib import Path

import numpy as np

ACTION_WORDS = ("push", "move-up", "pull", "move-down", "slide", "move-sideways")
COLOR_WORDS = ("red", "scarlet", "green", "harlequin", "blue", "azure",
               "yellow", "blonde", "cyan", "greenish-blue", "violet", "purple")
SPEED_WORDS = ("slowly", "unhurriedly", "fast", "quickly")
SIGNALS = ("describe", "execute", "repeat_action", "repeat_language")
BOS, EOS = "<BOS>", "<EOS>"

ACTION_TYPES = ("push", "pull", "slide")
COLORS = ("red", "green", "blue", "yellow", "cyan", "violet")
POSITIONS = ("left", "right")
SPEEDS = ("slow", "fast")

SEQ_LEN = {"fast": 50, "slow": 100}
N_JOINTS = 5
LANG_LEN = 5
N_VARIATIONS = 6
DEFAULT_RESOLUTION = (48, 64)
KEYFRAME_JITTER = 0.02

RGB = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.10, 0.20, 0.90),
    "yellow": (0.92, 0.88, 0.10),
    "cyan": (0.10, 0.85, 0.85),
    "violet": (0.60, 0.15, 0.80),
}
_SPEED_WORD = {"slow": "slowly", "fast": "fast"}


class EncodingError(ValueError):
    pass


class Vocabulary:
    """28 one-hot tokens ordered as action, colour, speed words, signals, BOS, EOS."""

    def __init__(self):
        self.tokens = list(ACTION_WORDS + COLOR_WORDS + SPEED_WORDS + SIGNALS) + [BOS, EOS]
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        self.category = {}
        for cat, words in (("action", ACTION_WORDS), ("color", COLOR_WORDS), ("speed", SPEED_WORDS)):
            for w in words:
                self.category[w] = cat
        self._swap = {}
        for words in (ACTION_WORDS, COLOR_WORDS, SPEED_WORDS):
            for orig, alt in zip(words[::2], words[1::2]):
                self._swap[orig], self._swap[alt] = alt, orig
        self._originals = {w for words in (ACTION_WORDS, COLOR_WORDS, SPEED_WORDS) for w in words[::2]}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self._index

    def index(self, word):
        try:
            return self._index[word]
        except KeyError:
            raise EncodingError(f"word {word!r} is not in the vocabulary") from None

    def synonym(self, word):
        """The paired word of the same category (the map is an involution)."""
        return self._swap[word]

    def canonical(self, word):
        return word if word in self._originals else self._swap[word]

    def meaning(self, word):
        """Map a description word to its semantic value (e.g. 'scarlet' -> 'red')."""
        w = self.canonical(word)
        if self.category[w] == "speed":
            return "slow" if w == "slowly" else "fast"
        return w

    def words_for(self, category, value):
        """Both surface forms for a semantic value, original first."""
        if category == "speed":
            value = _SPEED_WORD[value]
        return value, self._swap[value]


VOCAB = Vocabulary()


def build_vocabulary():
    return VOCAB


@dataclass(frozen=True)
class ActionLabel:
    action_type: str
    position: str
    speed: str

    @property
    def seq_len(self):
        return SEQ_LEN[self.speed]


@dataclass(frozen=True)
class Scene:
    left_color: str
    right_color: str
    arrangement_id: int

    def color_at(self, position):
        return self.left_color if position == "left" else self.right_color


def arrangements():
    """Twelve ordered colour pairs: cyclic neighbours in both orders."""
    out = []
    for i, c in enumerate(COLORS):
        nxt = COLORS[(i + 1) % len(COLORS)]
        out.append((c, nxt))
        out.append((nxt, c))
    return [Scene(left, right, k) for k, (left, right) in enumerate(out)]


def action_labels():
    return [ActionLabel(a, p, s) for a, p, s in itertools.product(ACTION_TYPES, POSITIONS, SPEEDS)]


def enumerate_patterns():
    """All 144 (label, scene) pairs in a fixed order."""
    return [(label, scene) for label in action_labels() for scene in arrangements()]


def describe(label, scene):
    """The 8 synonym variants of the 3-word description, originals first."""
    actions = VOCAB.words_for("action", label.action_type)
    colors = VOCAB.words_for("color", scene.color_at(label.position))
    speeds = VOCAB.words_for("speed", label.speed)
    return [(a, c, s) for a in actions for c in colors for s in speeds]


def all_descriptions():
    return [(a, c, s) for a in ACTION_WORDS for c in COLOR_WORDS for s in SPEED_WORDS]


def semantics(description):
    """(action_type, color, speed) of a 3-word description."""
    return tuple(VOCAB.meaning(w) for w in description)


# ---------------------------------------------------------------- trajectories

REST_POSTURE = np.array([0.0, -0.5, 0.6, 0.0, 0.0])
_YAW = {"left": 0.35, "right": -0.35}
# reaction lead-in and settling hold last a fixed number of steps at either
# speed, so the share of static frames reveals the speed
LEAD_STEPS, HOLD_STEPS = 5, 15
_APPROACH_SHARE = 0.45
# fast motions are made with a stiffer arm: extended elbow, raised wrist pitch
# and tilted wrist.  Joints 2-4 leave the hand position unchanged.
FAST_POSTURE = np.array([0.0, 0.0, -0.35, 0.35, 0.3])


def _keyframes(label):
    yaw = _YAW[label.position]
    if label.action_type == "push":
        approach = [yaw, -0.1, 0.3, -0.2, 0.0]
        end = [yaw, 0.35, -0.1, -0.2, 0.0]
    elif label.action_type == "pull":
        approach = [yaw, 0.35, -0.1, 0.3, 0.5]
        end = [yaw, -0.1, 0.3, 0.3, 0.5]
    else:
        side = 1.0 if label.position == "left" else -1.0
        approach = [yaw - 0.1 * side, 0.1, 0.1, 0.0, -0.5]
        end = [yaw + 0.2 * side, 0.1, 0.1, 0.0, -0.5]
    return np.array(approach), np.array(end)


def min_jerk(tau):
    """Minimum-jerk phase 10t^3 - 15t^4 + 6t^5 on [0, 1] (clipped outside)."""
    tau = np.clip(tau, 0.0, 1.0)
    return tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau ** 2)


def _motion_phase(m):
    k = np.arange(m, dtype=float)
    return np.clip((k - LEAD_STEPS) / (m - LEAD_STEPS - HOLD_STEPS - 1), 0.0, 1.0)


def manipulation_progress(m):
    """Phase in [0, 1] of the object-moving segment for each of ``m`` steps."""
    return min_jerk((_motion_phase(m) - _APPROACH_SHARE) / (1.0 - _APPROACH_SHARE))


def synthesize_trajectory(label, scene, seed):
    """Joint trajectory (M x 5) in [-1, 1] for one episode.

    ``scene`` does not influence the arm motion (only which cube gets moved is
    visible in the frames) but is kept in the signature for symmetry with the
    renderer.
    """
    rng = np.random.default_rng(seed)
    approach, end = _keyframes(label)
    approach = approach + rng.normal(0.0, KEYFRAME_JITTER, N_JOINTS)
    end = end + rng.normal(0.0, KEYFRAME_JITTER, N_JOINTS)
    if label.speed == "fast":
        approach, end = approach + FAST_POSTURE, end + FAST_POSTURE
    m = label.seq_len
    s1 = min_jerk(_motion_phase(m) / _APPROACH_SHARE)[:, None]
    s2 = manipulation_progress(m)[:, None]
    joints = REST_POSTURE + s1 * (approach - REST_POSTURE) + s2 * (end - approach)
    # stored as float32 on disk; round here so loaded and generated corpora agree
    return np.clip(joints, -1.0, 1.0).astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------- rendering

_CUBE_CENTER = {"left": (0.33, 0.62), "right": (0.67, 0.62)}
_CUBE_SIZE = (0.14, 0.16)
_SHOULDER = (0.15, 1.05)
_BACKGROUND = np.array([0.75, 0.75, 0.78])
_TABLE = np.array([0.55, 0.40, 0.25])
_ARM = np.array([0.40, 0.40, 0.45])
_HAND = np.array([0.95, 0.95, 0.95])


def cube_offset(label, progress):
    """Displacement (du, dw) of the manipulated cube at manipulation ``progress``."""
    if label.action_type == "push":
        return 0.0, -0.10 * progress
    if label.action_type == "pull":
        return 0.0, 0.10 * progress
    side = -1.0 if label.position == "left" else 1.0
    return 0.10 * side * progress, 0.0


def hand_position(joints):
    return 0.5 - 0.48 * joints[0], 0.62 - 0.35 * joints[1]


def _segment_mask(uu, ww, p, q, radius):
    pu, pw = p
    du, dw = q[0] - pu, q[1] - pw
    denom = du * du + dw * dw
    s = np.clip(((uu - pu) * du + (ww - pw) * dw) / denom, 0.0, 1.0) if denom > 0 else 0.0
    return (uu - pu - s * du) ** 2 + (ww - pw - s * dw) ** 2 <= radius * radius


def render_frame(scene, joints, offsets=None, resolution=DEFAULT_RESOLUTION):
    """Rasterise one RGB frame (H x W x 3, float32 in [0, 1]).

    ``offsets`` maps position ('left'/'right') to a (du, dw) cube displacement
    in normalised image coordinates.
    """
    joints = np.asarray(joints, dtype=float)
    if joints.shape != (N_JOINTS,) or np.any(np.abs(joints) > 1.0):
        raise ValueError("joints must be a 5-vector within [-1, 1]")
    h, w = resolution
    ww, uu = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    img = np.empty((h, w, 3))
    img[:] = _BACKGROUND
    img[ww > 0.45] = _TABLE
    offsets = offsets or {}
    for pos in POSITIONS:
        cu, cw = _CUBE_CENTER[pos]
        du, dw = offsets.get(pos, (0.0, 0.0))
        cu, cw = cu + du, cw + dw
        inside = (np.abs(uu - cu) <= _CUBE_SIZE[0] / 2) & (np.abs(ww - cw) <= _CUBE_SIZE[1] / 2)
        img[inside] = RGB[scene.color_at(pos)]
    hand = hand_position(joints)
    mid = ((_SHOULDER[0] + hand[0]) / 2, (_SHOULDER[1] + hand[1]) / 2)
    elbow = (mid[0] - 0.08 * (1.0 + joints[2]), mid[1] - 0.05 * (1.0 + joints[2]))
    angle = 0.9 * joints[3] - np.pi / 2
    tip = (hand[0] + 0.06 * np.cos(angle + 0.8 * joints[4]), hand[1] + 0.06 * np.sin(angle + 0.8 * joints[4]))
    arm = _segment_mask(uu, ww, _SHOULDER, elbow, 0.035) | _segment_mask(uu, ww, elbow, hand, 0.03)
    img[arm] = _ARM
    img[_segment_mask(uu, ww, hand, tip, 0.025)] = _HAND
    return img.astype(np.float32)


def render_episode(label, scene, joints, resolution=DEFAULT_RESOLUTION, steps=None):
    """Frames for every step of an episode, or only for the given ``steps``."""
    progress = manipulation_progress(len(joints))
    steps = range(len(joints)) if steps is None else steps
    frames = np.empty((len(steps),) + tuple(resolution) + (3,), dtype=np.float32)
    for k, t in enumerate(steps):
        frames[k] = render_frame(scene, joints[t], {label.position: cube_offset(label, progress[t])}, resolution)
    return frames


# ---------------------------------------------------------------- samples / corpus

@dataclass
class Sample:
    index: int
    scene: Scene
    label: ActionLabel
    variation: int
    variation_seed: int
    joints: np.ndarray
    resolution: tuple = DEFAULT_RESOLUTION
    _frames: np.ndarray | None = field(default=None, repr=False)

    @property
    def descriptions(self):
        return describe(self.label, self.scene)

    @property
    def semantics(self):
        return self.label.action_type, self.scene.color_at(self.label.position), self.label.speed

    @property
    def seq_len(self):
        return len(self.joints)

    def frames(self, steps=None):
        if self._frames is not None:
            return np.asarray(self._frames if steps is None else self._frames[list(steps)])
        return render_episode(self.label, self.scene, self.joints, self.resolution, steps)


@dataclass
class Corpus:
    seed: int
    samples: list
    train_indices: list
    test_indices: list
    resolution: tuple = DEFAULT_RESOLUTION

    def __len__(self):
        return len(self.samples)

    @property
    def train(self):
        return [self.samples[i] for i in self.train_indices]

    @property
    def test(self):
        return [self.samples[i] for i in self.test_indices]

    def checksum(self, with_frames=False):
        """SHA-256 over metadata, split and joint values (and frames on request)."""
        h = hashlib.sha256()
        h.update(json.dumps(self._meta(), sort_keys=True).encode())
        for s in self.samples:
            h.update(np.ascontiguousarray(s.joints, dtype="<f4").tobytes())
            if with_frames:
                h.update(np.ascontiguousarray(s.frames(), dtype="<f4").tobytes())
        return h.hexdigest()

    def _meta(self):
        return {
            "seed": self.seed,
            "resolution": list(self.resolution),
            "n_samples": len(self.samples),
            "train_indices": list(self.train_indices),
            "test_indices": list(self.test_indices),
            "samples": [
                {"action_type": s.label.action_type, "position": s.label.position, "speed": s.label.speed,
                 "arrangement_id": s.scene.arrangement_id, "variation": s.variation,
                 "variation_seed": s.variation_seed, "seq_len": s.seq_len}
                for s in self.samples
            ],
        }


def split_corpus(samples):
    """Pick 216 test samples: 6 per (action type, colour, speed) class.

    Each class has 4 patterns (colour on the left or right in two
    arrangements each); two patterns contribute two variations and two
    contribute one, so every pattern keeps at least four training episodes.
    """
    by_class = {}
    for s in samples:
        by_class.setdefault(s.semantics, {}).setdefault((s.label, s.scene.arrangement_id), []).append(s)
    test = []
    for ci, key in enumerate(sorted(by_class)):
        patterns = [by_class[key][p] for p in sorted(by_class[key], key=lambda p: (p[0].position, p[1]))]
        # interleave left/right so the doubled picks cover both positions
        patterns = [patterns[0], patterns[2], patterns[1], patterns[3]]
        for pi, episodes in enumerate(patterns):
            take = 2 if pi < 2 else 1
            for k in range(take):
                test.append(episodes[(ci + pi + 3 * k) % len(episodes)].index)
    test = sorted(test)
    test_set = set(test)
    train = [s.index for s in samples if s.index not in test_set]
    return train, test


def generate_corpus(seed=0, resolution=DEFAULT_RESOLUTION):
    samples = []
    for p, (label, scene) in enumerate(enumerate_patterns()):
        for v in range(N_VARIATIONS):
            vseed = int(np.random.SeedSequence([seed, p, v]).generate_state(1)[0])
            joints = synthesize_trajectory(label, scene, vseed)
            samples.append(Sample(len(samples), scene, label, v, vseed, joints, tuple(resolution)))
    train, test = split_corpus(samples)
    return Corpus(seed, samples, train, test, tuple(resolution))


# ---------------------------------------------------------------- language encoding

def encode_language(signal, description=None):
    """One-hot (5 x 28) layout ``[signal, action, colour, speed, EOS]``.

    Without a description the three word rows are all-zero vectors.
    """
    x = np.zeros((LANG_LEN, len(VOCAB)))
    x[0, VOCAB.index(signal)] = 1.0
    if description is not None:
        if len(description) != 3:
            raise EncodingError("descriptions have exactly three words")
        for k, word in enumerate(description):
            if word not in VOCAB.category:
                raise EncodingError(f"{word!r} is not a description word")
            x[k + 1, VOCAB.index(word)] = 1.0
    x[LANG_LEN - 1, VOCAB.index(EOS)] = 1.0
    return x


def decode_language(x):
    """Inverse of :func:`encode_language`: (signal, description-or-None)."""
    x = np.asarray(x)
    signal = VOCAB.tokens[int(np.argmax(x[0]))]
    rows = x[1:4]
    if not rows.any():
        return signal, None
    return signal, tuple(VOCAB.tokens[int(np.argmax(r))] for r in rows)


def sentence_targets(description):
    """Token indices the language decoder must emit: three words then EOS."""
    return np.array([VOCAB.index(w) for w in description] + [VOCAB.index(EOS)])


# ---------------------------------------------------------------- persistence

def save_corpus(corpus, path, frames=True):
    """Write corpus metadata, per-sample binaries and descriptions, and a checksum file."""
    path = Path(path)
    (path / "samples").mkdir(parents=True, exist_ok=True)
    meta = corpus._meta()
    meta["frames"] = bool(frames)
    (path / "corpus.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    for s in corpus.samples:
        with open(path / "samples" / f"{s.index:04d}.bin", "wb") as fh:
            fh.write(np.ascontiguousarray(s.joints, dtype="<f4").tobytes())
            if frames:
                fh.write(np.ascontiguousarray(s.frames(), dtype="<f4").tobytes())
        (path / "samples" / f"{s.index:04d}.txt").write_text(
            "\n".join(" ".join(d) for d in s.descriptions) + "\n")
    (path / "checksum").write_text(corpus.checksum() + "\n")


def load_corpus(path):
    path = Path(path)
    meta = json.loads((path / "corpus.json").read_text())
    scenes = arrangements()
    res = tuple(meta["resolution"])
    samples = []
    for i, rec in enumerate(meta["samples"]):
        m = rec["seq_len"]
        blob = path / "samples" / f"{i:04d}.bin"
        joints = np.fromfile(blob, dtype="<f4", count=m * N_JOINTS).reshape(m, N_JOINTS).astype(np.float64)
        frames = None
        if meta.get("frames"):
            frames = np.memmap(blob, dtype="<f4", mode="r", offset=m * N_JOINTS * 4, shape=(m,) + res + (3,))
        label = ActionLabel(rec["action_type"], rec["position"], rec["speed"])
        samples.append(Sample(i, scenes[rec["arrangement_id"]], label, rec["variation"],
                              rec["variation_seed"], joints, res, frames))
    corpus = Corpus(meta["seed"], samples, meta["train_indices"], meta["test_indices"], res)
    stored = (path / "checksum").read_text().strip()
    if stored != corpus.checksum():
        raise ValueError(f"corpus checksum mismatch in {os.fspath(path)}")
    return corpus
