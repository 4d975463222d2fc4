"""Frozen seeded feature encoders and the learnable prompt blocks.

The text and image towers are stand-ins for a pretrained vision-language
model: fixed random linear maps, fully determined by a seed, never trained.
Only the prompt vectors carry gradients; the text path is linear-then-tanh-
then-normalize so its Jacobian w.r.t. the prompts has a closed form.
"""

from dataclasses import dataclass

import numpy as np

# per-purpose stream tags so one experiment seed yields independent draws
TEXT_ENCODER_TAG = 101
IMAGE_ENCODER_TAG = 102
PROMPT_INIT_TAG = 103

PROMPT_INIT_STD = 0.02
NORM_FLOOR = 1e-12

# Pre-tanh budget for the text tower.  The two input blocks get separate
# projection scales so that (a) the class block drives tanh well into its
# curved region, making per-class saturation masks diverse enough that a
# shared prompt shift produces class-dependent feature moves, and (b) the
# prompt block carries enough of the response that prompt gradients have
# leverage at the stock learning rate.  Near-linear scalings fail on both
# counts: normalization cancels the gain, and one shared shift cannot
# align two classes at once.
TEXT_CLASS_GAIN = 1.5
TEXT_PROMPT_GAIN = 1.2


class ShapeMismatch(ValueError):
    """Input dimensions disagree with the encoder."""


class UnknownClass(ValueError):
    """class_id outside the encoder's class range."""


@dataclass
class PromptPair:
    """Learnable prompt vectors: one shared block, one private block."""

    global_prompt: np.ndarray  # (s, d_l)
    local_prompt: np.ndarray   # (s, d_l)

    def __post_init__(self):
        self.global_prompt = np.asarray(self.global_prompt, dtype=np.float64)
        self.local_prompt = np.asarray(self.local_prompt, dtype=np.float64)
        if self.global_prompt.ndim != 2:
            raise ShapeMismatch("prompt blocks must be 2-D (s, d_l)")
        if self.global_prompt.shape != self.local_prompt.shape:
            raise ShapeMismatch(
                f"prompt blocks differ in shape: {self.global_prompt.shape} "
                f"vs {self.local_prompt.shape}"
            )
        if not (np.all(np.isfinite(self.global_prompt))
                and np.all(np.isfinite(self.local_prompt))):
            raise ValueError("prompt entries must be finite")

    @property
    def s(self):
        return self.global_prompt.shape[0]

    @property
    def d_l(self):
        return self.global_prompt.shape[1]

    def copy(self):
        return PromptPair(self.global_prompt.copy(), self.local_prompt.copy())


@dataclass(frozen=True)
class FrozenTextEncoder:
    """Fixed class embeddings plus a fixed projection; immutable."""

    class_embeddings: np.ndarray  # (K, d_l)
    projection: np.ndarray        # ((s+1)*d_l, d_f)

    @property
    def num_classes(self):
        return self.class_embeddings.shape[0]

    @property
    def d_l(self):
        return self.class_embeddings.shape[1]


@dataclass(frozen=True)
class FrozenImageEncoder:
    """Fixed patch projection; immutable."""

    patch_projection: np.ndarray  # (d_raw, d_f)
    v_patches: int

    @property
    def d_raw(self):
        return self.patch_projection.shape[0]


@dataclass
class FeatureMap:
    """Encoded image: per-patch rows plus a pooled class token, all unit-norm."""

    patches: np.ndarray      # (V, d_f)
    class_token: np.ndarray  # (d_f,)


def make_text_encoder(seed, num_classes=10, s=16, d_l=32, d_f=24):
    """Build the frozen text tower for a given seed and geometry.

    Class embeddings are unit-scale.  The projection is one fixed matrix
    whose class-block and prompt-block rows are drawn at different scales,
    normalized by the expected input norm of each block, so pre-tanh
    contributions sit at TEXT_CLASS_GAIN and TEXT_PROMPT_GAIN regardless
    of geometry.
    """
    rng = np.random.default_rng([seed, TEXT_ENCODER_TAG])
    emb = rng.normal(0.0, 1.0, size=(num_classes, d_l))
    scale_cls = TEXT_CLASS_GAIN / np.sqrt(d_l)
    scale_prompt = TEXT_PROMPT_GAIN / (PROMPT_INIT_STD * np.sqrt(s * d_l))
    proj = np.vstack([
        rng.normal(0.0, scale_cls, size=(d_l, d_f)),
        rng.normal(0.0, scale_prompt, size=(s * d_l, d_f)),
    ])
    emb.flags.writeable = False
    proj.flags.writeable = False
    return FrozenTextEncoder(class_embeddings=emb, projection=proj)


def make_image_encoder(seed, v_patches=16, d_raw=16, d_f=24):
    rng = np.random.default_rng([seed, IMAGE_ENCODER_TAG])
    proj = rng.normal(0.0, 1.0 / np.sqrt(d_raw), size=(d_raw, d_f))
    proj.flags.writeable = False
    return FrozenImageEncoder(patch_projection=proj, v_patches=v_patches)


def _text_forward(encoder, prompt, class_id):
    if not 0 <= class_id < encoder.num_classes:
        raise UnknownClass(
            f"class_id {class_id} outside [0, {encoder.num_classes})"
        )
    prompt = np.asarray(prompt, dtype=np.float64)
    if prompt.ndim != 2 or prompt.shape[1] != encoder.d_l:
        raise ShapeMismatch(
            f"prompt shape {prompt.shape} incompatible with d_l={encoder.d_l}"
        )
    expect = (prompt.shape[0] + 1) * encoder.d_l
    if encoder.projection.shape[0] != expect:
        raise ShapeMismatch(
            f"prompt length {prompt.shape[0]} incompatible with projection "
            f"fan-in {encoder.projection.shape[0]}"
        )
    z = np.concatenate([encoder.class_embeddings[class_id], prompt.ravel()])
    t = np.tanh(z @ encoder.projection)
    norm = max(float(np.linalg.norm(t)), NORM_FLOOR)
    return t, norm, t / norm


def encode_text(encoder, prompt, class_id):
    """Text feature for one class under the given prompt block; unit-norm."""
    _, _, h = _text_forward(encoder, prompt, class_id)
    return h


def text_prompt_pullback(encoder, prompt, class_id, grad_h):
    """Closed-form vector-Jacobian product of encode_text.

    Given dL/dh for the returned unit feature, yields dL/dprompt with the
    same (s, d_l) shape.  Chain: normalize <- tanh <- linear; only the prompt
    rows of the projection contribute.
    """
    t, norm, h = _text_forward(encoder, prompt, class_id)
    grad_h = np.asarray(grad_h, dtype=np.float64)
    g_t = (grad_h - h * float(h @ grad_h)) / norm
    g_a = g_t * (1.0 - t * t)  # tanh'(a) = 1 - tanh(a)^2
    g_z = encoder.projection @ g_a
    d_l = encoder.d_l
    return g_z[d_l:].reshape(np.asarray(prompt).shape)


def encode_image(encoder, raw_patches):
    """Project raw patch vectors and L2-normalize; pool the class token."""
    raw = np.asarray(raw_patches, dtype=np.float64)
    if raw.ndim != 2 or raw.shape != (encoder.v_patches, encoder.d_raw):
        raise ShapeMismatch(
            f"raw patches shape {raw.shape}, expected "
            f"({encoder.v_patches}, {encoder.d_raw})"
        )
    proj = raw @ encoder.patch_projection
    norms = np.maximum(np.linalg.norm(proj, axis=1, keepdims=True), NORM_FLOOR)
    patches = proj / norms
    pooled = proj.mean(axis=0)
    pooled_norm = max(float(np.linalg.norm(pooled)), NORM_FLOOR)
    return FeatureMap(patches=patches, class_token=pooled / pooled_norm)


def init_prompts(seed, s=16, d_l=32):
    """Fresh prompt pair, both blocks the same small Gaussian draw.

    Starting global and local from identical values makes any later
    divergence attributable to training rather than initialization.
    """
    if s < 1 or d_l < 1:
        raise ValueError(f"prompt dims must be >= 1, got s={s}, d_l={d_l}")
    rng = np.random.default_rng([seed, PROMPT_INIT_TAG])
    block = rng.normal(0.0, PROMPT_INIT_STD, size=(s, d_l))
    return PromptPair(global_prompt=block.copy(), local_prompt=block.copy())
