"""Soft-prompted transformer policy with switchable heterogeneity variants.

The backbone (encoder stubs, positional embeddings, pre-norm transformer
blocks) is shared across domains.  What is domain-specific depends on the
variant:

    shared_only   single shared input/output projection, no prompts
    domain_heads  shared inputs, per-domain output projection
    hpt_proj      per-domain cross-attention resampler over the obs tokens
                  plus a per-domain output projection
    lang_prompt   hardware description text, hash-tokenized into a shared
                  learnable embedding table, prepended to the sequence
    soft_prompt   per-domain learnable prompt matrix prepended to the
                  sequence plus per-domain input/output projections

Sequence layout (hpt_proj replaces the obs block with its latent tokens):

    [prefix: prompts|lang] [main tokens][task token][aux tokens] [K control]

Control token j packs (noisy action A_t[j], proprio, time embedding); the
proprio and time embedding are broadcast to all K control tokens.  Prefix
tokens carry no positional embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from .dataset import ARM_DIM, CONT_PER_ARM, HardwareConfig, NormStats
from .errors import ConfigError, InputError, NumericError

VARIANTS = ("shared_only", "domain_heads", "hpt_proj", "lang_prompt", "soft_prompt")

INIT_STD = 0.02
LANG_PAD_WORD = "<pad>"


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "soft_prompt"
    d: int = 128
    layers: int = 4
    heads: int = 4
    prompt_len: int = 16
    k: int = 30
    cont_dim: int = 18
    grip_dim: int = 2
    proprio_dim: int = 16
    obs_feat_dim: int = 40
    enc_hidden: int = 128
    main_tokens: int = 4
    aux_tokens: int = 2
    max_aux_views: int = 1
    time_emb_dim: int = 32
    n_tasks: int = 8
    lang_vocab: int = 1024
    lang_len: int = 8
    hpt_latents: int = 6
    shared_io: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.d % self.heads != 0:
            raise ConfigError("hidden size must be divisible by heads")
        if self.prompt_len < 0:
            raise ConfigError("prompt_len must be >= 0")

    @property
    def uses_prompts(self):
        return self.variant == "soft_prompt" and self.prompt_len > 0

    @property
    def per_domain_in(self):
        return self.variant == "soft_prompt" and not self.shared_io

    @property
    def per_domain_out(self):
        if self.variant == "soft_prompt":
            return not self.shared_io
        return self.variant in ("domain_heads", "hpt_proj")

    @property
    def prefix_len(self):
        if self.variant == "soft_prompt":
            return self.prompt_len
        if self.variant == "lang_prompt":
            return self.lang_len
        return 0

    @property
    def n_obs_tokens(self):
        return self.main_tokens + 1 + self.max_aux_views * self.aux_tokens

    @property
    def seq_len(self):
        if self.variant == "hpt_proj":
            return self.hpt_latents + 1 + self.k
        return self.prefix_len + self.n_obs_tokens + self.k

    @property
    def ctrl_in_dim(self):
        return self.cont_dim + self.proprio_dim + self.time_emb_dim

    @property
    def out_dim(self):
        return self.cont_dim + self.grip_dim

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def config_for_suite(suite, holdout=None, **overrides):
    """Derive padded model widths from a suite of (EmbodimentSpec, HardwareConfig)."""
    from . import synthenv

    entries = list(suite) + ([holdout] if holdout is not None else [])
    max_arms = max(hw.num_arms for _, hw in entries)
    base = dict(
        cont_dim=CONT_PER_ARM * max_arms,
        grip_dim=max_arms,
        proprio_dim=max(hw.proprio_dim for _, hw in entries),
        obs_feat_dim=max(synthenv.obs_dim(spec) for spec, _ in entries),
        max_aux_views=max(len(hw.aux_views) for _, hw in entries),
        n_tasks=synthenv.G_MAX,
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# small helpers


def stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2s(text.encode(), digest_size=8).digest(), "little")


def param_rng(root_seed: int, name: str):
    return np.random.default_rng(np.random.SeedSequence([root_seed, stable_hash64(name)]))


def time_embedding(t, dim):
    """Sinusoidal embedding of flow time in [0, 1]; t is scaled so the
    highest frequency resolves ~1e-3 steps near t = 1."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    ang = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def hash_tokenize(text: str, vocab: int, length: int):
    words = text.lower().split()
    ids = [stable_hash64(w) % vocab for w in words]
    pad = stable_hash64(LANG_PAD_WORD) % vocab
    ids = ids[:length] + [pad] * max(0, length - len(ids))
    return np.asarray(ids, dtype=np.int64)


# ---------------------------------------------------------------------------
# policy model


@dataclass
class DomainInfo:
    hardware: HardwareConfig
    norm_stats: NormStats | None = None

    @property
    def arms(self):
        return self.hardware.num_arms

    @property
    def cont_dims(self):
        return CONT_PER_ARM * self.arms

    @property
    def grip_dims(self):
        return self.arms


class PolicyModel:
    """Parameter store plus forward pass; all state is name-keyed numpy."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.domains: dict[str, DomainInfo] = {}
        self.adapters: dict[str, tuple[str, str]] = {}  # weight name -> (a name, b name)
        self.lora_scale = 0.0
        self.root_seed = 0
        self._lang_cache: dict[str, np.ndarray] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, hardware: list[HardwareConfig], seed: int):
        if not hardware:
            raise ConfigError("need at least one domain")
        m = cls(config)
        m.root_seed = seed
        m._create_shared()
        for hw in hardware:
            m.register_domain(hw)
        return m

    def _rng(self, name):
        return param_rng(self.root_seed, name)

    def _trunc(self, name, shape):
        r = truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=shape, random_state=self._rng(name))
        return np.asarray(r, dtype=self.config.np_dtype)

    def _normal(self, name, shape):
        return (self._rng(name).normal(0.0, INIT_STD, size=shape)).astype(self.config.np_dtype)

    def _zeros(self, shape):
        return np.zeros(shape, dtype=self.config.np_dtype)

    def _ones(self, shape):
        return np.ones(shape, dtype=self.config.np_dtype)

    def _add_linear(self, prefix, d_in, d_out, zero=False):
        if zero:
            self.params[prefix + ".w"] = self._zeros((d_in, d_out))
        else:
            self.params[prefix + ".w"] = self._trunc(prefix + ".w", (d_in, d_out))
        self.params[prefix + ".b"] = self._zeros((d_out,))

    def _create_shared(self):
        c = self.config
        self._add_linear("enc.main.l1", c.obs_feat_dim, c.enc_hidden)
        self._add_linear("enc.main.l2", c.enc_hidden, c.main_tokens * c.d)
        if c.max_aux_views > 0:
            self._add_linear("enc.aux.l1", c.obs_feat_dim, c.enc_hidden)
            self._add_linear("enc.aux.l2", c.enc_hidden, c.aux_tokens * c.d)
        self.params["enc.task_emb"] = self._trunc("enc.task_emb", (c.n_tasks, c.d))
        if c.variant == "lang_prompt":
            self.params["enc.lang_emb"] = self._trunc("enc.lang_emb", (c.lang_vocab, c.d))
        n_pos = c.seq_len - c.prefix_len if c.variant != "hpt_proj" else 1 + c.k
        self.params["backbone.pos_emb"] = self._trunc("backbone.pos_emb", (n_pos, c.d))
        for i in range(c.layers):
            p = f"backbone.block{i}"
            self.params[p + ".ln1.g"] = self._ones((c.d,))
            self.params[p + ".ln1.b"] = self._zeros((c.d,))
            for w in ("wq", "wk", "wv", "wo"):
                self.params[f"{p}.attn.{w}"] = self._trunc(f"{p}.attn.{w}", (c.d, c.d))
            for b in ("bq", "bk", "bv", "bo"):
                self.params[f"{p}.attn.{b}"] = self._zeros((c.d,))
            self.params[p + ".ln2.g"] = self._ones((c.d,))
            self.params[p + ".ln2.b"] = self._zeros((c.d,))
            self._add_linear(p + ".mlp.l1", c.d, 4 * c.d)
            self._add_linear(p + ".mlp.l2", 4 * c.d, c.d)
        self.params["backbone.ln_f.g"] = self._ones((c.d,))
        self.params["backbone.ln_f.b"] = self._zeros((c.d,))
        if not c.per_domain_in:
            self._add_linear("shared.in_proj", c.ctrl_in_dim, c.d)
        if not c.per_domain_out:
            self._add_linear("shared.out_proj", c.d, c.out_dim, zero=True)

    def register_domain(self, hw: HardwareConfig, init_from: str | None = None):
        """Create per-domain parameters; optionally copy io projections (and
        resampler) from an already-registered domain."""
        c = self.config
        if hw.domain_id in self.domains:
            raise ConfigError(f"domain {hw.domain_id!r} already registered")
        if len(hw.aux_views) > c.max_aux_views:
            raise ConfigError(f"domain {hw.domain_id!r} has more aux views than the model supports")
        if hw.proprio_dim > c.proprio_dim:
            raise ConfigError(f"domain {hw.domain_id!r} proprio wider than the model")
        self.domains[hw.domain_id] = DomainInfo(hardware=hw)
        p = f"domain.{hw.domain_id}"
        if c.variant == "soft_prompt" and c.prompt_len > 0:
            self.params[p + ".prompt"] = self._normal(p + ".prompt", (c.prompt_len, c.d))
        if c.variant == "hpt_proj":
            self.params[p + ".resampler.q"] = self._normal(p + ".resampler.q", (c.hpt_latents, c.d))
            self.params[p + ".resampler.wk"] = self._trunc(p + ".resampler.wk", (c.d, c.d))
            self.params[p + ".resampler.wv"] = self._trunc(p + ".resampler.wv", (c.d, c.d))
        if c.per_domain_in:
            self._add_linear(p + ".in_proj", c.ctrl_in_dim, c.d)
        if c.per_domain_out:
            self._add_linear(p + ".out_proj", c.d, c.out_dim, zero=True)
        if init_from is not None:
            src = f"domain.{init_from}"
            if init_from not in self.domains:
                raise ConfigError(f"source domain {init_from!r} not registered")
            for suffix in (".in_proj.w", ".in_proj.b", ".out_proj.w", ".out_proj.b",
                           ".resampler.q", ".resampler.wk", ".resampler.wv"):
                if src + suffix in self.params and p + suffix in self.params:
                    self.params[p + suffix] = self.params[src + suffix].copy()

    def set_norm_stats(self, stats: dict[str, NormStats]):
        for domain, s in stats.items():
            if domain in self.domains:
                self.domains[domain].norm_stats = s

    # -- bookkeeping ---------------------------------------------------------

    def domain_param_names(self, domain_id):
        prefix = f"domain.{domain_id}."
        return [n for n in self.params if n.startswith(prefix)]

    def group_of(self, name: str) -> str:
        """Learning-rate group: prompts / vl_encoders / rest."""
        if ".prompt" in name or ".resampler.q" in name:
            return "prompts"
        if name.startswith("enc."):
            return "vl_encoders"
        return "rest"

    def is_decay_param(self, name: str) -> bool:
        """Weight decay applies to linear matrix weights only."""
        if name.endswith((".g", ".b")) or name.endswith("_emb"):
            return False
        if ".prompt" in name or ".resampler.q" in name:
            return False
        if name.startswith("lora."):
            return True
        return self.params[name].ndim == 2

    def param_report(self):
        total = sum(v.size for v in self.params.values())
        unshared = sum(v.size for n, v in self.params.items() if n.startswith("domain."))
        shared = total - unshared
        per_domain = {
            d: sum(self.params[n].size for n in self.domain_param_names(d)) for d in self.domains
        }
        return {
            "total": total,
            "shared": shared,
            "unshared": unshared,
            "per_domain": per_domain,
            "unshared_fraction": unshared / total if total else 0.0,
        }

    def to_dtype(self, dtype):
        dt = np.dtype(dtype)
        self.params = {n: v.astype(dt) for n, v in self.params.items()}
        self.config = replace(self.config, dtype=dt.name)
        return self

    def clone(self):
        m = PolicyModel(self.config)
        m.params = {n: v.copy() for n, v in self.params.items()}
        m.domains = {d: DomainInfo(info.hardware, info.norm_stats) for d, info in self.domains.items()}
        m.adapters = dict(self.adapters)
        m.lora_scale = self.lora_scale
        m.root_seed = self.root_seed
        return m

    def lang_ids(self, domain_id):
        if domain_id not in self._lang_cache:
            text = self.domains[domain_id].hardware.description_text
            self._lang_cache[domain_id] = hash_tokenize(
                text, self.config.lang_vocab, self.config.lang_len
            )
        return self._lang_cache[domain_id]

    # -- batch assembly ------------------------------------------------------

    def make_batch(self, samples):
        """Pad a list of dataset.Sample into fixed-width arrays grouped by domain."""
        c = self.config
        b = len(samples)
        dt = c.np_dtype
        main = np.zeros((b, c.obs_feat_dim), dtype=dt)
        aux = np.zeros((b, max(c.max_aux_views, 1), c.obs_feat_dim), dtype=dt)
        aux_present = np.zeros((b, max(c.max_aux_views, 1)), dtype=dt)
        proprio = np.zeros((b, c.proprio_dim), dtype=dt)
        task_ids = np.zeros(b, dtype=np.int64)
        cont = np.zeros((b, c.k, c.cont_dim), dtype=dt)
        grip = np.zeros((b, c.k, c.grip_dim), dtype=dt)
        cont_mask = np.zeros((b, c.cont_dim), dtype=dt)
        grip_mask = np.zeros((b, c.grip_dim), dtype=dt)
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(samples):
            if s.domain_id not in self.domains:
                raise InputError(f"domain {s.domain_id!r} not registered")
            info = self.domains[s.domain_id]
            hw = info.hardware
            groups.setdefault(s.domain_id, []).append(i)
            mv = s.obs[hw.main_view]
            main[i, : mv.shape[0]] = mv
            for v, view in enumerate(hw.aux_views):
                av = s.obs[view]
                aux[i, v, : av.shape[0]] = av
                aux_present[i, v] = 1.0
            proprio[i, : s.proprio.shape[0]] = s.proprio
            task_ids[i] = s.task_id
            if s.chunk is not None:
                if s.chunk.k != c.k:
                    raise InputError(f"chunk has {s.chunk.k} anchors, model expects {c.k}")
                anchors = s.chunk.anchors
                if info.norm_stats is not None:
                    anchors = (anchors - info.norm_stats.mean) / info.norm_stats.std
                for a in range(info.arms):
                    blk = anchors[:, a * ARM_DIM : (a + 1) * ARM_DIM]
                    cont[i, :, a * CONT_PER_ARM : (a + 1) * CONT_PER_ARM] = blk[:, :CONT_PER_ARM]
                    grip[i, :, a] = blk[:, CONT_PER_ARM]
            cont_mask[i, : info.cont_dims] = 1.0
            grip_mask[i, : info.grip_dims] = 1.0
        return {
            "n": b,
            "groups": {d: np.asarray(ix) for d, ix in groups.items()},
            "main": main,
            "aux": aux,
            "aux_present": aux_present,
            "proprio": proprio,
            "task_ids": task_ids,
            "cont": cont,
            "grip": grip,
            "cont_mask": cont_mask,
            "grip_mask": grip_mask,
        }

    # -- forward -------------------------------------------------------------

    def _wrap_params(self, trainable):
        tensors = {}
        for n, v in self.params.items():
            req = trainable is None or n in trainable
            tensors[n] = ad.Tensor(v, requires_grad=req, name=n)
        return tensors

    def _weight(self, tensors, name):
        """Weight tensor with any attached low-rank adapter applied."""
        w = tensors[name]
        if name in self.adapters:
            a_name, b_name = self.adapters[name]
            delta = ad.matmul(tensors[a_name], tensors[b_name])
            w = ad.add(w, ad.scale(delta, self.lora_scale))
        return w

    def _mlp2(self, tensors, prefix, x):
        h = ad.gelu(ad.linear(x, self._weight(tensors, prefix + ".l1.w"), tensors[prefix + ".l1.b"]))
        return ad.linear(h, self._weight(tensors, prefix + ".l2.w"), tensors[prefix + ".l2.b"])

    def _obs_tokens(self, tensors, batch):
        c = self.config
        b = batch["n"]
        toks = [ad.reshape(self._mlp2(tensors, "enc.main", batch["main"]), (b, c.main_tokens, c.d))]
        toks.append(ad.reshape(ad.embedding(tensors["enc.task_emb"], batch["task_ids"]), (b, 1, c.d)))
        if c.max_aux_views > 0:
            flat = batch["aux"].reshape(b * c.max_aux_views, c.obs_feat_dim)
            a = self._mlp2(tensors, "enc.aux", flat)
            toks.append(ad.reshape(a, (b, c.max_aux_views * c.aux_tokens, c.d)))
        return ad.concat(toks, axis=1) if len(toks) > 1 else toks[0]

    def _obs_key_mask(self, batch):
        """Additive mask over obs token slots: 0 live, -1e9 for absent aux."""
        c = self.config
        b = batch["n"]
        live = np.ones((b, c.n_obs_tokens), dtype=c.np_dtype)
        if c.max_aux_views > 0:
            off = c.main_tokens + 1
            for v in range(c.max_aux_views):
                live[:, off + v * c.aux_tokens : off + (v + 1) * c.aux_tokens] = batch["aux_present"][:, v : v + 1]
        return live

    def _control_inputs(self, batch, a_t, t):
        c = self.config
        b = batch["n"]
        temb = time_embedding(t, c.time_emb_dim).astype(c.np_dtype)
        ctrl = np.concatenate(
            [
                np.asarray(a_t, dtype=c.np_dtype),
                np.broadcast_to(batch["proprio"][:, None, :], (b, c.k, c.proprio_dim)),
                np.broadcast_to(temb[:, None, :], (b, c.k, c.time_emb_dim)),
            ],
            axis=2,
        )
        return ctrl

    def _domain_linear(self, tensors, batch, x, suffix, shared_name):
        """Apply the shared or per-domain projection named by suffix to x."""
        b = batch["n"]
        if shared_name is not None:
            return ad.linear(x, self._weight(tensors, shared_name + ".w"), tensors[shared_name + ".b"])
        parts, idxs = [], []
        for domain, idx in batch["groups"].items():
            p = f"domain.{domain}{suffix}"
            xi = x[idx] if isinstance(x, np.ndarray) else ad.gather_rows(x, idx)
            parts.append(ad.linear(xi, self._weight(tensors, p + ".w"), tensors[p + ".b"]))
            idxs.append(idx)
        return ad.scatter_rows(idxs, parts, b)

    def _prefix_tokens(self, tensors, batch):
        c = self.config
        b = batch["n"]
        if c.variant == "soft_prompt" and c.prompt_len > 0:
            parts, idxs = [], []
            for domain, idx in batch["groups"].items():
                prompt = tensors[f"domain.{domain}.prompt"]
                parts.append(ad.broadcast_to(prompt, (len(idx), c.prompt_len, c.d)))
                idxs.append(idx)
            return ad.scatter_rows(idxs, parts, b)
        if c.variant == "lang_prompt":
            ids = np.stack([self.lang_ids(d) for d in batch["domain_seq"]])
            return ad.embedding(tensors["enc.lang_emb"], ids)
        return None

    def _resample(self, tensors, batch, obs_tokens, obs_live):
        """Per-domain cross-attention resampler: obs tokens -> latent tokens."""
        c = self.config
        b = batch["n"]
        parts, idxs = [], []
        for domain, idx in batch["groups"].items():
            p = f"domain.{domain}.resampler"
            oi = ad.gather_rows(obs_tokens, idx)
            q = ad.broadcast_to(tensors[p + ".q"], (len(idx), c.hpt_latents, c.d))
            k = ad.linear(oi, tensors[p + ".wk"])
            v = ad.linear(oi, tensors[p + ".wv"])
            mask = ((1.0 - obs_live[idx]) * -1e9)[:, None, None, :]
            att = ad.attention(
                ad.reshape(q, (len(idx), 1, c.hpt_latents, c.d)),
                ad.reshape(k, (len(idx), 1, c.n_obs_tokens, c.d)),
                ad.reshape(v, (len(idx), 1, c.n_obs_tokens, c.d)),
                mask.astype(c.np_dtype),
            )
            parts.append(ad.reshape(att, (len(idx), c.hpt_latents, c.d)))
            idxs.append(idx)
        return ad.scatter_rows(idxs, parts, b)

    def _split_heads(self, x, b, t):
        c = self.config
        hd = c.d // c.heads
        return ad.swapaxes(ad.reshape(x, (b, t, c.heads, hd)), 1, 2)

    def forward_batch(self, batch, a_t, t, trainable=None, check_finite=True,
                      return_sequence=False):
        """Velocity and gripper logits for a padded batch.

        a_t: (B, K, cont_dim) noisy continuous actions (normalized space)
        t:   (B,) flow times in [0, 1]
        Returns (velocity, grip_logits) as Tensors (B, K, cont_dim/grip_dim).
        """
        c = self.config
        b = batch["n"]
        batch = dict(batch)
        batch["domain_seq"] = self._batch_domain_seq(batch)
        tensors = self._wrap_params(trainable)

        ctrl_in = self._control_inputs(batch, a_t, t)
        if c.per_domain_in:
            ctrl = self._domain_linear(tensors, batch, ctrl_in, ".in_proj", None)
        else:
            ctrl = self._domain_linear(tensors, batch, ctrl_in, ".in_proj", "shared.in_proj")

        obs_tokens = self._obs_tokens(tensors, batch)
        obs_live = self._obs_key_mask(batch)

        if c.variant == "hpt_proj":
            latents = self._resample(tensors, batch, obs_tokens, obs_live)
            task = ad.reshape(ad.embedding(tensors["enc.task_emb"], batch["task_ids"]), (b, 1, c.d))
            body = ad.concat([task, ctrl], axis=1)
            body = ad.add(body, tensors["backbone.pos_emb"])
            seq = ad.concat([latents, body], axis=1)
            live = np.concatenate(
                [np.ones((b, c.hpt_latents + 1), dtype=c.np_dtype),
                 np.ones((b, c.k), dtype=c.np_dtype)], axis=1)
        else:
            body = ad.concat([obs_tokens, ctrl], axis=1)
            body = ad.add(body, tensors["backbone.pos_emb"])
            prefix = self._prefix_tokens(tensors, batch)
            seq = body if prefix is None else ad.concat([prefix, body], axis=1)
            live = np.concatenate(
                [np.ones((b, c.prefix_len), dtype=c.np_dtype), obs_live,
                 np.ones((b, c.k), dtype=c.np_dtype)], axis=1)

        t_len = seq.shape[1]
        attn_mask = ((1.0 - live) * -1e9).astype(c.np_dtype)[:, None, None, :]
        if return_sequence:
            return seq

        x = seq
        for i in range(c.layers):
            p = f"backbone.block{i}"
            h = ad.layernorm(x, tensors[p + ".ln1.g"], tensors[p + ".ln1.b"])
            q = self._split_heads(ad.linear(h, self._weight(tensors, p + ".attn.wq"), tensors[p + ".attn.bq"]), b, t_len)
            kk = self._split_heads(ad.linear(h, self._weight(tensors, p + ".attn.wk"), tensors[p + ".attn.bk"]), b, t_len)
            v = self._split_heads(ad.linear(h, self._weight(tensors, p + ".attn.wv"), tensors[p + ".attn.bv"]), b, t_len)
            att = ad.attention(q, kk, v, attn_mask)
            att = ad.reshape(ad.swapaxes(att, 1, 2), (b, t_len, c.d))
            x = ad.add(x, ad.linear(att, self._weight(tensors, p + ".attn.wo"), tensors[p + ".attn.bo"]))
            h2 = ad.layernorm(x, tensors[p + ".ln2.g"], tensors[p + ".ln2.b"])
            x = ad.add(x, self._mlp2(tensors, p + ".mlp", h2))
            if check_finite and not np.all(np.isfinite(x.data)):
                raise NumericError(f"non-finite activations after backbone block {i}")

        x = ad.layernorm(x, tensors["backbone.ln_f.g"], tensors["backbone.ln_f.b"])
        ctrl_out = ad.slice_axis(x, 1, t_len - c.k, t_len)
        if c.per_domain_out:
            out = self._domain_linear(tensors, batch, ctrl_out, ".out_proj", None)
        else:
            out = self._domain_linear(tensors, batch, ctrl_out, ".out_proj", "shared.out_proj")
        if check_finite and not np.all(np.isfinite(out.data)):
            raise NumericError("non-finite output projection")
        velocity = ad.slice_axis(out, 2, 0, c.cont_dim)
        logits = ad.slice_axis(out, 2, c.cont_dim, c.out_dim)
        return velocity, logits, tensors

    def _batch_domain_seq(self, batch):
        seq = [None] * batch["n"]
        for domain, idx in batch["groups"].items():
            for i in idx:
                seq[i] = domain
        return seq

    def forward(self, domain_id, obs, proprio, task_id, a_t, t):
        """Single-sample forward: returns (velocity (K, cont_dim), logits (K, grip_dim))."""
        from .dataset import Sample

        sample = Sample(domain_id, obs, np.asarray(proprio), int(task_id), None)
        batch = self.make_batch([sample])
        with ad.no_grad():
            vel, logits, _ = self.forward_batch(
                batch, np.asarray(a_t, dtype=self.config.np_dtype)[None], np.atleast_1d(t)
            )
        return vel.data[0], logits.data[0]
