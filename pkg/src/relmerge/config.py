"""Flat ``key = value`` run configuration.

Every key has a typed default. Files may contain blank lines and ``#``
comments. Unknown keys and unparsable values raise :class:`ConfigError`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError

HEADER = "# effective configuration\n"


@dataclass
class RunConfig:
    seed: int = 0                       # master seed; all streams derive from it
    threads: int = 1                    # worker cap for data generation and scoring
    # data
    n_images: int = 2000
    max_objects: int = 4
    duplicate_fraction: float = 0.0     # share of scenes whose objects repeat the first
    mixture: str = "1:0.25,2:0.4,3:0.2,4:0.15"   # object-count distribution
    # scoring / selection
    embedder: str = "stub"              # stub | service
    embedder_url: str = ""
    embedder_timeout: float = 10.0
    embedder_retries: int = 2
    k: int = 0                          # records kept by select; 0 keeps all
    by: str = "total"                   # total | pair | single
    # model
    h: int = 8
    w: int = 8
    d_model: int = 64
    d_text: int = 64
    d_img: int = 64
    img_tokens: int = 4
    n_layers: int = 4
    mlp_mult: int = 2
    max_refs: int = 4
    T: int = 1000
    merge_mode: str = ""                # uniform | weighted | trained | text; empty: weighted when
                                        # training, the checkpoint's own mode when sampling
    null_image: str = "token"           # token | zero
    # training
    mode: str = "pretrain"              # pretrain | finetune
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    p_drop_text: float = 0.05
    p_drop_image: float = 0.05
    p_drop_both: float = 0.05
    checkpoint_every: int = 1000
    init_seed: int = 0
    # sampling
    sample_steps: int = 50
    guidance: float = 7.5
    t_start: int = 0                    # 0 starts from pure noise at T
    clip_x0: float = 1.0                # 0 disables clamping of predicted x0
    n_samples: int = 4
    # relevance harness / evaluation
    n_prompts: int = 100
    noise_scale: float = 1.0
    strategy: str = "both"              # uniform | weighted | both
    inject_layers: str = "all"          # "all" or comma-separated layer indices
    single_step: int = -1               # -1 injects at every sampler step
    target: int = 0
    eval_t_start: int = 150             # layout-sketch start step for harness and bench
    bench_size: int = 200
    bench_seed: int = 1
    self_reference: bool = False

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, values: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(key, raw, type(getattr(RunConfig(), key))))
        return self

    def to_text(self) -> str:
        lines = [HEADER.rstrip("\n")]
        for k, v in asdict(self).items():
            lines.append(f"{k} = {_render(v)}")
        return "\n".join(lines) + "\n"

    def echo(self, out_dir, command: str) -> Path:
        path = Path(out_dir) / f"{command}.config.txt"
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    def layers(self, n_layers: int):
        if self.inject_layers.strip() == "all":
            return None
        try:
            out = tuple(int(x) for x in self.inject_layers.split(",") if x.strip())
        except ValueError as e:
            raise ConfigError(f"inject_layers must be 'all' or integers: {self.inject_layers!r}") from e
        if not out or any(not 0 <= x < n_layers for x in out):
            raise ConfigError(f"inject_layers {out} outside [0, {n_layers})")
        return out

    def mixture_dict(self) -> dict:
        try:
            pairs = [p.split(":") for p in self.mixture.split(",") if p.strip()]
            mix = {int(a): float(b) for a, b in pairs}
        except ValueError as e:
            raise ConfigError(f"bad mixture {self.mixture!r}; expected 'count:prob,...'") from e
        if not mix or any(p < 0 for p in mix.values()) or sum(mix.values()) <= 0:
            raise ConfigError(f"bad mixture {self.mixture!r}")
        return mix


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        if typ is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, typ):
            return raw
        raw = str(raw)
    s = raw.strip()
    try:
        if typ is bool:
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if typ is int:
            return int(s)
        if typ is float:
            return float(s)
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from e
    return s


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg.update(parse_config_text(text, str(path)))
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg
