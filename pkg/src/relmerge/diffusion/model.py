"""Toy transformer denoiser with decoupled, relevance-weighted cross-attention.

Every block is: self-attention over latent positions, cross-attention to the
prompt and to each reference image, a merge of those streams, then a two-layer
MLP; all residual with pre-normalization. The forward pass can keep a cache
that :func:`backward` consumes to produce gradients for every parameter.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import numkit as nk
from ..attention import attend, attend_backward, normalize_backward, normalize_relevance, \
    relevance_backward, relevance_from_qk
from ..errors import ShapeError
from ..numkit import Rng
from ..scenekit.embed import EMBED_DIM
from ..scenekit.scenes import NULL, PAD, VOCAB

MERGE_MODES = ("uniform", "weighted", "trained", "text")
# slot kinds in Conditions.kind
EMPTY, REF, NULL_IMG = 0, 1, 2
MASK_BIAS = -1e9


@dataclass
class DenoiserConfig:
    h: int = 8
    w: int = 8
    channels: int = 3
    d_model: int = 64
    d_text: int = 64
    d_img: int = 64
    d_clip: int = EMBED_DIM
    img_tokens: int = 4
    n_layers: int = 4
    mlp_mult: int = 2
    vocab_size: int = len(VOCAB)
    max_prompt: int = 16
    obj_tokens: int = 2
    max_refs: int = 4
    merge_mode: str = "weighted"
    null_image: str = "token"
    T: int = 1000

    def __post_init__(self):
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}")
        if self.null_image not in ("token", "zero"):
            raise ValueError("null_image must be 'token' or 'zero'")

    @property
    def n_pos(self) -> int:
        return self.h * self.w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def layer_names(layer: int) -> dict[str, str]:
    p = f"l{layer}."
    keys = ("t_w", "sa_q", "sa_k", "sa_v", "sa_o", "ca_q", "k_text", "v_text", "k_img", "v_img",
            "ca_o", "f_w", "f_b", "w1", "b1", "w2", "b2")
    return {k: p + k for k in keys}


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, int]]:
    D, Dt, Di = cfg.d_model, cfg.d_text, cfg.d_img
    shapes = {
        "tok_embed": (cfg.vocab_size, Dt),
        "pos_embed": (cfg.max_prompt, Dt),
        "img_proj": (cfg.d_clip, cfg.img_tokens * Di),
        "null_img": (1, cfg.d_clip),
        "in_w": (cfg.channels, D),
        "in_b": (1, D),
        "lat_pos": (cfg.n_pos, D),
        "time_w": (D, D),
        "time_b": (1, D),
    }
    for l in range(cfg.n_layers):
        n = layer_names(l)
        for k in ("t_w", "sa_q", "sa_k", "sa_v", "sa_o", "ca_q", "ca_o"):
            shapes[n[k]] = (D, D)
        shapes[n["k_text"]] = shapes[n["v_text"]] = (Dt, D)
        shapes[n["k_img"]] = shapes[n["v_img"]] = (Di, D)
        shapes[n["f_w"]] = (D, 1)
        shapes[n["f_b"]] = (1, 1)
        shapes[n["w1"]] = (D, cfg.mlp_mult * D)
        shapes[n["b1"]] = (1, cfg.mlp_mult * D)
        shapes[n["w2"]] = (cfg.mlp_mult * D, D)
        shapes[n["b2"]] = (1, D)
    shapes["out_w"] = (D, cfg.channels)
    shapes["out_b"] = (1, cfg.channels)
    return shapes


def trainable_names(cfg: DenoiserConfig, mode: str) -> list[str]:
    """Pretraining updates everything; finetuning only the image K/V and text-weight layers."""
    if mode == "pretrain":
        return list(param_shapes(cfg))
    if mode == "finetune":
        out = []
        for l in range(cfg.n_layers):
            n = layer_names(l)
            out += [n["k_img"], n["v_img"], n["f_w"], n["f_b"]]
        return out
    raise ValueError(f"unknown training mode {mode!r}")


def init_params(cfg: DenoiserConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = Rng(seed).derive("init")
    params = {}
    for name, shape in param_shapes(cfg).items():
        base = name.split(".")[-1]
        if base in ("in_b", "time_b", "b1", "b2", "out_b", "f_w", "f_b"):
            arr = np.zeros(shape)
        elif base in ("tok_embed", "null_img"):
            arr = rng.derive(name).normal(shape)
        elif base in ("pos_embed", "lat_pos"):
            arr = 0.1 * rng.derive(name).normal(shape)
        else:
            arr = rng.derive(name).normal(shape) / math.sqrt(shape[0])
        params[name] = arr.astype(dtype)
    return params


def time_features(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class Conditions:
    """Batched conditions. Slot ``m`` of sample ``b`` pairs object text with a reference.

    ``kind[b, m]`` is EMPTY, REF (real reference embedding) or NULL_IMG (the
    learned null image). ``has_obj[b, m]`` marks slots with object text, which
    is what produces a relevance map.
    """

    prompt: np.ndarray      # (B, S) int
    obj_tokens: np.ndarray  # (B, M, So) int
    has_obj: np.ndarray     # (B, M) bool
    refs: np.ndarray        # (B, M, d_clip)
    kind: np.ndarray        # (B, M) int

    @property
    def batch(self) -> int:
        return self.prompt.shape[0]

    def take(self, idx) -> "Conditions":
        return Conditions(self.prompt[idx], self.obj_tokens[idx], self.has_obj[idx],
                          self.refs[idx], self.kind[idx])


def make_conditions(prompts, objects, refs, cfg: DenoiserConfig,
                    drop_text=None, drop_image=None) -> Conditions:
    """Pack per-sample token lists and reference vectors into padded arrays.

    ``prompts``: list of token-id lists. ``objects``: per sample, a list of
    object token lists. ``refs``: per sample, a list of reference embeddings
    (same length as its objects) or ``None`` for no references.
    Dropped text becomes the null prompt; dropped images become one null slot.
    """
    B = len(prompts)
    drop_text = np.zeros(B, bool) if drop_text is None else np.asarray(drop_text, bool)
    drop_image = np.zeros(B, bool) if drop_image is None else np.asarray(drop_image, bool)
    M = max([1] + [len(o) for o in objects])
    if M > cfg.max_refs:
        raise ShapeError(f"{M} objects exceed max_refs={cfg.max_refs}")
    S = max(1, max(len(p) for p in prompts))
    if S > cfg.max_prompt:
        raise ShapeError(f"prompt of {S} tokens exceeds max_prompt={cfg.max_prompt}")
    prompt = np.full((B, S), PAD, dtype=np.int64)
    obj = np.full((B, M, cfg.obj_tokens), PAD, dtype=np.int64)
    has_obj = np.zeros((B, M), bool)
    ref = np.zeros((B, M, cfg.d_clip))
    kind = np.zeros((B, M), dtype=np.int64)
    for b in range(B):
        toks = [NULL] if drop_text[b] or not prompts[b] else list(prompts[b])
        prompt[b, :len(toks)] = toks
        for m, ot in enumerate(objects[b]):
            if len(ot) != cfg.obj_tokens:
                raise ShapeError(f"object text must have {cfg.obj_tokens} tokens, got {len(ot)}")
            obj[b, m] = ot
            has_obj[b, m] = True
        r = refs[b] if refs is not None else None
        if drop_image[b] or not r:
            kind[b, 0] = NULL_IMG
        else:
            if len(r) != len(objects[b]):
                raise ShapeError("each reference needs one object text")
            for m, vec in enumerate(r):
                ref[b, m] = vec
                kind[b, m] = REF
    return Conditions(prompt, obj, has_obj, ref, kind)


def unconditional(cond: Conditions) -> Conditions:
    """Same batch with text and images fully dropped."""
    B, M = cond.kind.shape
    prompt = np.full((B, 1), NULL, dtype=np.int64)
    kind = np.zeros((B, 1), dtype=np.int64)
    kind[:, 0] = NULL_IMG
    return Conditions(prompt, np.full((B, 1, cond.obj_tokens.shape[2]), PAD, dtype=np.int64),
                      np.zeros((B, 1), bool), np.zeros((B, 1, cond.refs.shape[2])), kind)


def _acc(grads, name, a, g):
    """grads[name] += a^T g, summed over all leading axes."""
    grads[name] += a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])


@dataclass
class ForwardOptions:
    merge_mode: str | None = None
    text_hook: object = None            # callable(layer, z_text, relevance (B,M,N)) -> z_text
    weight_override: np.ndarray | None = None     # (B, M, N) raw image weights for REF slots
    relevance_override: list | None = None        # per-layer (B, M, N) relevance maps
    trace: dict | None = field(default=None)


def forward(params, cfg: DenoiserConfig, x_t, t, cond: Conditions, opts: ForwardOptions | None = None,
            keep: bool = False):
    """Predict the noise in ``x_t`` (B, N, C). Returns ``(eps_hat, cache)``."""
    opts = opts or ForwardOptions()
    mode = opts.merge_mode or cfg.merge_mode
    if mode not in MERGE_MODES:
        raise ValueError(f"unknown merge mode {mode!r}")
    P = params
    dt = P["in_w"].dtype
    x_t = np.asarray(x_t, dtype=dt)
    B, N, C = x_t.shape
    if N != cfg.n_pos or C != cfg.channels:
        raise ShapeError(f"x_t {x_t.shape} does not match config ({cfg.n_pos} positions, {cfg.channels} channels)")
    if cond.batch != B:
        raise ShapeError(f"conditions for {cond.batch} samples, x_t has {B}")
    S = cond.prompt.shape[1]
    M, So = cond.obj_tokens.shape[1:]
    Si, Di = cfg.img_tokens, cfg.d_img

    ct = P["tok_embed"][cond.prompt] + P["pos_embed"][:S]
    tbias = np.where(cond.prompt == PAD, MASK_BIAS, 0.0).astype(dt)[:, None, :]
    co = P["tok_embed"][cond.obj_tokens] + P["pos_embed"][:So]
    is_null = cond.kind == NULL_IMG
    refs = np.where(is_null[..., None], P["null_img"][0], cond.refs).astype(dt)
    ci = (refs @ P["img_proj"]).reshape(B, M, Si, Di)
    if cfg.null_image == "zero":
        img_mask = (cond.kind == REF)
    else:
        img_mask = cond.kind != EMPTY
    rel_slot = (cond.kind == REF) & cond.has_obj
    use_rel = mode in ("weighted", "trained") and opts.weight_override is None
    tf = time_features(t, cfg.d_model).astype(dt)
    temb_pre = tf @ P["time_w"] + P["time_b"]
    temb = nk.silu(temb_pre)
    h = x_t @ P["in_w"] + P["in_b"] + P["lat_pos"] + temb[:, None, :]

    cache = {"x": x_t, "tf": tf, "temb_pre": temb_pre, "temb": temb, "ct": ct, "co": co, "refs": refs, "ci": ci, "is_null": is_null,
             "cond": cond, "mode": mode, "use_rel": use_rel, "opts": opts, "layers": []}
    for l in range(cfg.n_layers):
        n = layer_names(l)
        h = h + (temb @ P[n["t_w"]])[:, None, :]
        a1, ln1 = nk.layer_norm(h)
        q, k, v = a1 @ P[n["sa_q"]], a1 @ P[n["sa_k"]], a1 @ P[n["sa_v"]]
        sa, p_sa = attend(q, k, v)
        h = h + sa @ P[n["sa_o"]]

        z, ln2 = nk.layer_norm(h)
        Q = z @ P[n["ca_q"]]
        Kt, Vt = ct @ P[n["k_text"]], ct @ P[n["v_text"]]
        zt, p_t = attend(Q, Kt, Vt, tbias)
        Ko = co @ P[n["k_text"]]
        A, p_o = relevance_from_qk(Q[:, None], Ko)
        if opts.relevance_override is not None:
            A = np.asarray(opts.relevance_override[l], dtype=dt)
        if opts.trace is not None:
            opts.trace.setdefault("relevance", []).append(A)
        if opts.text_hook is not None:
            zt = opts.text_hook(l, zt, A).astype(dt)
        Ki, Vi = ci @ P[n["k_img"]], ci @ P[n["v_img"]]
        zi, p_i = attend(Q[:, None], Ki, Vi)

        safe_A = np.where(rel_slot[..., None], A, 1.0)
        if opts.weight_override is not None:
            wimg = np.where(rel_slot[..., None], opts.weight_override, 1.0)
        elif use_rel:
            wimg = normalize_relevance(safe_A)
        else:
            wimg = np.ones((B, M, N), dtype=dt)
        wimg = (wimg * img_mask[..., None]).astype(dt)

        if mode in ("trained", "text"):
            s = nk.sigmoid(zt @ P[n["f_w"]] + P[n["f_b"]])[..., 0]
            g = normalize_relevance(s)
            zt_w = g[..., None] * zt
        else:
            s = g = None
            zt_w = zt
        znew = zt_w + (wimg[..., None] * zi).sum(axis=1)
        h = h + znew @ P[n["ca_o"]]

        a3, ln3 = nk.layer_norm(h)
        u = a3 @ P[n["w1"]] + P[n["b1"]]
        m = nk.silu(u)
        h = h + m @ P[n["w2"]] + P[n["b2"]]
        if keep:
            cache["layers"].append(dict(
                a1=a1, ln1=ln1, q=q, k=k, v=v, sa=sa, p_sa=p_sa, z=z, ln2=ln2, Q=Q, Kt=Kt, Vt=Vt,
                zt=zt, p_t=p_t, Ko=Ko, A=safe_A, p_o=p_o, Ki=Ki, Vi=Vi, zi=zi, p_i=p_i, wimg=wimg,
                s=s, g=g, znew=znew, a3=a3, ln3=ln3, u=u, m=m, rel_slot=rel_slot, img_mask=img_mask))
    af, lnf = nk.layer_norm(h)
    out = af @ P["out_w"] + P["out_b"]
    if keep:
        cache.update(af=af, lnf=lnf)
    return out, (cache if keep else None)


def backward(params, cfg: DenoiserConfig, cache, g_out) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d eps_hat."""
    P = params
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    cond: Conditions = cache["cond"]
    mode = cache["mode"]
    opts: ForwardOptions = cache["opts"]
    B, N, _ = cache["x"].shape
    M = cond.obj_tokens.shape[1]

    _acc(grads, "out_w", cache["af"], g_out)
    grads["out_b"] += g_out.sum(axis=(0, 1))[None]
    gh = nk.layer_norm_backward(g_out @ P["out_w"].T, cache["lnf"])
    g_ct = np.zeros_like(cache["ct"])
    g_co = np.zeros_like(cache["co"])
    g_ci = np.zeros_like(cache["ci"])
    g_temb = np.zeros_like(cache["temb"])

    for l in range(cfg.n_layers - 1, -1, -1):
        n = layer_names(l)
        c = cache["layers"][l]
        # MLP
        _acc(grads, n["w2"], c["m"], gh)
        grads[n["b2"]] += gh.sum(axis=(0, 1))[None]
        g_u = nk.silu_backward(gh @ P[n["w2"]].T, c["u"])
        _acc(grads, n["w1"], c["a3"], g_u)
        grads[n["b1"]] += g_u.sum(axis=(0, 1))[None]
        gh = gh + nk.layer_norm_backward(g_u @ P[n["w1"]].T, c["ln3"])

        # merge
        _acc(grads, n["ca_o"], c["znew"], gh)
        g_znew = gh @ P[n["ca_o"]].T
        g_zi = c["wimg"][..., None] * g_znew[:, None]
        if mode in ("trained", "text"):
            g_zt = c["g"][..., None] * g_znew
            g_g = (g_znew * c["zt"]).sum(axis=-1)
            g_pre = nk.sigmoid_backward(normalize_backward(g_g, c["s"]), c["s"])
            _acc(grads, n["f_w"], c["zt"], g_pre[..., None])
            grads[n["f_b"]] += g_pre.sum()
            g_zt = g_zt + g_pre[..., None] @ P[n["f_w"]].T
        else:
            g_zt = g_znew

        dQ = np.zeros_like(c["Q"])
        if cache["use_rel"] and opts.relevance_override is None:
            g_w = (g_znew[:, None] * c["zi"]).sum(axis=-1) * c["img_mask"][..., None]
            g_A = normalize_backward(g_w, c["A"]) * c["rel_slot"][..., None]
            dQr, dKo = relevance_backward(g_A, c["Q"][:, None], c["Ko"], c["p_o"])
            dQ += dQr.sum(axis=1)
            _acc(grads, n["k_text"], cache["co"], dKo)
            g_co += dKo @ P[n["k_text"]].T

        dQi, dKi, dVi = attend_backward(g_zi, c["Q"][:, None], c["Ki"], c["Vi"], c["p_i"])
        dQ += dQi.sum(axis=1)
        _acc(grads, n["k_img"], cache["ci"], dKi)
        _acc(grads, n["v_img"], cache["ci"], dVi)
        g_ci += dKi @ P[n["k_img"]].T + dVi @ P[n["v_img"]].T

        dQt, dKt, dVt = attend_backward(g_zt, c["Q"], c["Kt"], c["Vt"], c["p_t"])
        dQ += dQt
        _acc(grads, n["k_text"], cache["ct"], dKt)
        _acc(grads, n["v_text"], cache["ct"], dVt)
        g_ct += dKt @ P[n["k_text"]].T + dVt @ P[n["v_text"]].T

        _acc(grads, n["ca_q"], c["z"], dQ)
        gh = gh + nk.layer_norm_backward(dQ @ P[n["ca_q"]].T, c["ln2"])

        # self-attention
        _acc(grads, n["sa_o"], c["sa"], gh)
        dq, dk, dv = attend_backward(gh @ P[n["sa_o"]].T, c["q"], c["k"], c["v"], c["p_sa"])
        _acc(grads, n["sa_q"], c["a1"], dq)
        _acc(grads, n["sa_k"], c["a1"], dk)
        _acc(grads, n["sa_v"], c["a1"], dv)
        g_a1 = dq @ P[n["sa_q"]].T + dk @ P[n["sa_k"]].T + dv @ P[n["sa_v"]].T
        gh = gh + nk.layer_norm_backward(g_a1, c["ln1"])
        gh_t = gh.sum(axis=1)
        _acc(grads, n["t_w"], cache["temb"], gh_t)
        g_temb += gh_t @ P[n["t_w"]].T

    _acc(grads, "in_w", cache["x"], gh)
    grads["in_b"] += gh.sum(axis=(0, 1))[None]
    grads["lat_pos"] += gh.sum(axis=0)
    g_temb = nk.silu_backward(g_temb + gh.sum(axis=1), cache["temb_pre"])
    _acc(grads, "time_w", cache["tf"], g_temb)
    grads["time_b"] += g_temb.sum(axis=0)[None]

    S = cond.prompt.shape[1]
    So = cond.obj_tokens.shape[2]
    np.add.at(grads["tok_embed"], cond.prompt, g_ct)
    grads["pos_embed"][:S] += g_ct.sum(axis=0)
    np.add.at(grads["tok_embed"], cond.obj_tokens, g_co)
    grads["pos_embed"][:So] += g_co.sum(axis=(0, 1))
    g_ci = g_ci.reshape(B, M, -1)
    _acc(grads, "img_proj", cache["refs"], g_ci)
    g_refs = g_ci @ P["img_proj"].T
    grads["null_img"] += (g_refs * cache["is_null"][..., None]).sum(axis=(0, 1))[None]
    return grads
