"""Command-line entry point: ``hierattn {mask,verify,bench,train,sample}``.

Settings come from built-in defaults, then an optional flat ``key = value``
file (``--config``), then flags. Exit codes: 0 success, 1 a check or run
failed, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import AttentionInputs, dense_attention, kernel_bench, tiled_attention
from .blockmask import (
    ORACLE_CAP,
    InteractionRules,
    TileState,
    build_block_mask,
    build_token_mask,
    save_block_mask,
    tile_stats,
    verify_block_mask,
    write_stats_json,
)
from .curve_layout import AnchorSpec, GridSpec, TokenLayout, WindowSpec, build_layout, hilbert_points
from .errors import ConfigError, HierAttnError, StateError
from .rope import RopeParams

THREADS_ENV = "HIERATTN_THREADS"
COMMANDS = ("mask", "verify", "bench", "train", "sample")
DEFAULT_SIDES = {"mask": (256,), "verify": (64,), "bench": (64, 128, 256)}
_RULE_FIELDS = {f.name: f.type for f in fields(InteractionRules)}


def _env_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None


@dataclass(frozen=True)
class RunConfig:
    sides: tuple = ()          # grid side(s); empty means the command's default
    window: int = 16
    halo: int = 2
    rho: int = 4
    lr_side: int = 0           # 0: side // rho
    guidance: bool = True
    text_len: int = 0
    q_tile: int = 128
    k_tile: int = 64
    head_dim: int = 64
    precision: str = "float32"
    seed: int = 0
    repetitions: int = 5
    warmup: int = 1
    threads: int = 1
    dense_baseline: bool = True
    output: str = "hierattn-out"
    rules: tuple = ()          # ((flag, value), ...) overrides on the default rules
    # verify
    oracle_instances: int = 3
    inject_fault: bool = False
    # train
    steps: int = 500
    batch: int = 4
    learning_rate: float = 0.02
    lora_rank: int = 16
    train_side: int = 8
    train_rho: int = 2
    # sample
    checkpoint: str = ""
    levels: int = 2
    base_side: int = 16
    sample_steps: int = 1
    label: int = 0
    pgm: bool = False

    def sides_for(self, command: str) -> tuple:
        return self.sides or DEFAULT_SIDES.get(command, (64,))

    def interaction_rules(self) -> InteractionRules:
        base = InteractionRules() if self.guidance else InteractionRules.no_guidance()
        try:
            return base.with_overrides(**dict(self.rules))
        except ConfigError as e:
            raise ConfigError(f"rules: {e}") from None

    def layout(self, side: int) -> TokenLayout:
        grid = GridSpec(side, side)
        anchor = None
        if self.guidance:
            lr = self.lr_side or side // self.rho
            anchor = AnchorSpec(lr, lr, self.rho)
        return build_layout(grid, WindowSpec(min(self.window, side), min(self.halo, max(0, min(self.window, side) - 1))),
                            anchor, self.text_len)

    def validate(self, command: Optional[str] = None) -> "RunConfig":
        """Check every field; raises ConfigError naming the offending field."""
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(f"{name}: {msg}")

        for name in ("window", "q_tile", "k_tile", "head_dim", "repetitions", "threads", "batch",
                     "lora_rank", "train_side", "train_rho", "base_side", "sample_steps", "rho",
                     "oracle_instances"):
            need(getattr(self, name) >= 1, name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("halo", "text_len", "seed", "warmup", "steps", "levels", "lr_side", "label"):
            need(getattr(self, name) >= 0, name, f"must be >= 0, got {getattr(self, name)}")
        need(self.window & (self.window - 1) == 0, "window", f"{self.window} is not a power of two")
        need(self.halo < self.window, "halo", f"{self.halo} must be < window {self.window}")
        need(self.head_dim % 4 == 0, "head_dim", f"{self.head_dim} must be a multiple of 4")
        need(self.precision in ("float32", "float64"), "precision", f"{self.precision!r} not float32/float64")
        need(self.repetitions >= 3, "repetitions", "timing needs at least 3 repetitions")
        need(self.learning_rate > 0, "learning_rate", "must be > 0")
        need(self.label in (0, 1), "label", "toy dataset has labels 0 and 1")
        for k, v in self.rules:
            need(k in _RULE_FIELDS, "rules", f"unknown rule {k!r}")
        self.interaction_rules()
        for side in self.sides:
            need(side >= 1 and side & (side - 1) == 0, "sides", f"{side} is not a power of two")
            if self.guidance:
                need(side % self.rho == 0, "rho", f"{self.rho} does not divide side {side}")
                if self.lr_side:
                    need(self.lr_side * self.rho == side, "lr_side",
                         f"{self.lr_side} * rho {self.rho} != side {side}")
                lr = self.lr_side or side // self.rho
                need(lr & (lr - 1) == 0, "rho", f"guidance side {lr} is not a power of two")
            try:
                self.layout(side)
            except ConfigError as e:
                raise ConfigError(f"sides: {e}") from None
        need(self.train_side % self.train_rho == 0, "train_rho", "must divide train_side")
        if command == "sample":
            need(self.checkpoint != "", "checkpoint", "sample needs --checkpoint")
            need(self.base_side & (self.base_side - 1) == 0, "base_side", "must be a power of two")
        return self

    # flat key=value text

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "rules":
                for k, rv in v:
                    lines.append(f"rule.{k} = {_fmt(rv)}")
            else:
                lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        values = {}
        rules = dict((base or cls()).rules)
        for no, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {no}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key.startswith("rule."):
                rules[key[5:]] = _rule_value(key[5:], raw)
            else:
                values[key] = raw
        return (base or cls()).updated(values, rules)

    def updated(self, raw: dict, rules: Optional[dict] = None) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        kw = {}
        for key, raw_v in raw.items():
            if key not in types or key == "rules":
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, types[key], raw_v)
        if rules is not None:
            kw["rules"] = tuple(sorted(rules.items()))
        return dataclasses.replace(self, **kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _bool(name, raw) -> bool:
    if isinstance(raw, bool):
        return raw
    s = str(raw).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{name}: {raw!r} is not a boolean")


def _coerce(name, typ, raw):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            return _bool(name, raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "tuple":
            if isinstance(raw, tuple):
                return raw
            return tuple(int(x) for x in str(raw).split(",") if x.strip())
        return str(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None


def _rule_value(name, raw):
    if name not in _RULE_FIELDS:
        raise ConfigError(f"rules: unknown rule {name!r}")
    return str(raw) if name == "lr_self_scope" else _bool(f"rule.{name}", raw)


# commands

def _plain(o):
    """JSON fallback for numpy scalars."""
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.output)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_mask(cfg: RunConfig) -> int:
    out = _out(cfg)
    rules = cfg.interaction_rules()
    for side in cfg.sides_for("mask"):
        layout = cfg.layout(side)
        block = build_block_mask(layout, rules, cfg.q_tile, cfg.k_tile)
        stats = tile_stats(block, cfg.head_dim)
        save_block_mask(block, out / f"mask_{side}.hbm")
        write_stats_json(stats, out / f"mask_{side}.json", side=side, window=cfg.window, halo=cfg.halo,
                         rho=cfg.rho if cfg.guidance else None, text_len=cfg.text_len)
        _say(f"mask side={side} S={block.seq_len} tiles(empty/partial/full)="
             f"{stats.empty}/{stats.partial}/{stats.full} attended={stats.attended_bit_fraction:.5f} "
             f"bytes={stats.storage_bytes}")
    return 0


def _suite_hilbert(cfg: RunConfig, side: int) -> dict:
    bad = []
    for order in range(0, 7):
        n = 1 << order
        xs, ys = hilbert_points(np.arange(n * n), order)
        if len(set(zip(xs.tolist(), ys.tolist()))) != n * n:
            bad.append(f"order {order}: not a bijection")
        if n > 1 and not (np.abs(np.diff(xs)) + np.abs(np.diff(ys)) == 1).all():
            bad.append(f"order {order}: non-unit step")
        for j in range(1, order + 1):
            bx = (xs >> j).reshape(-1, 4 ** j)
            by = (ys >> j).reshape(-1, 4 ** j)
            if not ((bx == bx[:, :1]).all() and (by == by[:, :1]).all()):
                bad.append(f"order {order}: level-{j} blocks not contiguous")
    layout = cfg.layout(side)
    seen = np.sort(layout.x_perm.ravel())
    if not np.array_equal(seen, np.arange(*layout.x_range)):
        bad.append("layout X permutation is not a bijection onto the X segment")
    return {"passed": not bad, "max_order": 6, "failures": bad}


def _suite_mask(cfg: RunConfig, side: int) -> dict:
    layout = cfg.layout(side)
    rules = cfg.interaction_rules()
    token = build_token_mask(layout, rules)
    block = build_block_mask(layout, rules, cfg.q_tile, cfg.k_tile)
    injected = None
    if cfg.inject_fault:
        empty = np.argwhere(block.tiles == TileState.EMPTY)
        if empty.size:
            i, j = map(int, empty[len(empty) // 2])
            block = block.with_tile_state(i, j, TileState.FULL)
        else:
            i, j = 0, int(block.row(0)[0][0])
            block = block.with_tile_state(i, j, TileState.EMPTY)
        injected = [i, j]
    rep = verify_block_mask(block, token)
    return {"passed": rep.ok, "seq_len": layout.seq_len, "discrepancies": int(rep.discrepancies),
            "bad_tiles": [list(map(int, t)) for t in rep.bad_tiles[:10]], "injected_tile": injected}


def _suite_oracle(cfg: RunConfig, side: int) -> dict:
    layout = cfg.layout(side)
    rules = cfg.interaction_rules()
    token = build_token_mask(layout, rules)
    block = build_block_mask(layout, rules, cfg.q_tile, cfg.k_tile)
    worst = {"float32": 0.0, "float64": 0.0}
    tol = {"float32": 1e-5, "float64": 1e-10}
    for k in range(cfg.oracle_instances):
        for prec in worst:
            x = AttentionInputs.random(layout.seq_len, cfg.head_dim, cfg.seed + k, prec)
            d = float(np.abs(tiled_attention(x, block, threads=cfg.threads) - dense_attention(x, token)).max())
            worst[prec] = max(worst[prec], d)
    return {"passed": all(worst[p] <= tol[p] for p in worst), "seq_len": layout.seq_len,
            "max_abs_diff": worst, "tolerance": tol, "instances": cfg.oracle_instances}


def _smooth_fd(f, arr, idx, regime, step=1e-4, min_step=1e-8):
    """Central difference with ``step``, shrunk while the stencil crosses a ReLU kink."""
    base = regime()
    old = arr[idx]
    while True:
        arr[idx] = old + step
        fp, rp = f(), regime()
        arr[idx] = old - step
        fm, rm = f(), regime()
        arr[idx] = old
        if (np.array_equal(rp, base) and np.array_equal(rm, base)) or step <= min_step:
            return (fp - fm) / (2 * step), step
        step /= 10


def _suite_gradient(cfg: RunConfig) -> dict:
    from .dit_toy.block import MmaBlockParams, mma_backward, mma_forward

    grid = GridSpec(8, 8)
    layout = build_layout(grid, WindowSpec(4, 1), AnchorSpec.for_grid(grid, 2), text_len=2)
    block = build_block_mask(layout, InteractionRules(), 16, 16)
    rng = np.random.default_rng(cfg.seed)
    p = MmaBlockParams.init(32, rng=rng)
    for a in (p.lora_q, p.lora_k, p.lora_v):
        a.up[...] = 0.3 * rng.standard_normal(a.up.shape)
    rope = RopeParams(p.head_dim)
    h = rng.standard_normal((layout.seq_len, 32))
    g = rng.standard_normal(h.shape)
    _, cache = mma_forward(h, layout, block, rope, p, return_cache=True)
    grads, _ = mma_backward(g, cache, p, rope, trainable=("lora", "head"))
    named = p.named()
    names = sorted(n for n in grads if n.startswith("lora_") or n == "wo")
    f = lambda: float((mma_forward(h, layout, block, rope, p) * g).sum())
    relu = lambda: mma_forward(h, layout, block, rope, p, return_cache=True)[1].z > 0
    worst, shrunk = 0.0, 0
    for k in range(50):
        name = names[k % len(names)]
        arr = named[name]
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
        fd, step = _smooth_fd(f, arr, idx, relu)
        shrunk += step < 1e-4
        worst = max(worst, abs(grads[name][idx] - fd) / max(abs(fd), 1e-8))
    return {"passed": worst <= 1e-6, "max_rel_error": worst, "tolerance": 1e-6, "params": 50,
            "kink_shrunk_steps": int(shrunk)}


def cmd_verify(cfg: RunConfig) -> int:
    out = _out(cfg)
    verdicts = {}
    for side in cfg.sides_for("verify"):
        S = cfg.layout(side).seq_len
        if S > ORACLE_CAP:
            raise ConfigError(f"sides: S={S} exceeds the oracle cap {ORACLE_CAP}")
        verdicts[f"oracle_{side}"] = _suite_oracle(cfg, side)
        verdicts[f"hilbert_{side}"] = _suite_hilbert(cfg, side)
        verdicts[f"mask_{side}"] = _suite_mask(cfg, side)
    verdicts["gradient"] = _suite_gradient(cfg)
    with open(out / "verify.json", "w") as fh:
        json.dump(verdicts, fh, indent=2, default=_plain)
    for name, v in verdicts.items():
        _say(f"{'PASS' if v['passed'] else 'FAIL'} {name}")
    return 0 if all(v["passed"] for v in verdicts.values()) else 1


BENCH_COLUMNS = ["S", "side", "visited_tiles", "skipped_tiles", "median_skip_ms", "median_dense_tiled_ms",
                 "speedup", "mask_bytes", "dense_mask_bytes"]


def cmd_bench(cfg: RunConfig) -> int:
    out = _out(cfg)
    rules = cfg.interaction_rules()
    rows = []
    for side in cfg.sides_for("bench"):
        layout = cfg.layout(side)
        block = build_block_mask(layout, rules, cfg.q_tile, cfg.k_tile)
        x = AttentionInputs.random(layout.seq_len, cfg.head_dim, cfg.seed, cfg.precision)
        r = kernel_bench(x, block, cfg.repetitions, cfg.warmup, cfg.threads, dense=cfg.dense_baseline)
        dense_ms = None if r.wall_time_dense_tiled is None else 1e3 * r.wall_time_dense_tiled
        row = dict(S=layout.seq_len, side=side, visited_tiles=r.visited_tiles, skipped_tiles=r.skipped_tiles,
                   median_skip_ms=1e3 * r.wall_time_skip, median_dense_tiled_ms=dense_ms, speedup=r.speedup,
                   mask_bytes=block.storage_bytes(), dense_mask_bytes=block.dense_bit_bytes())
        rows.append(row)
        _say(" ".join(f"{k}={v}" for k, v in row.items()))
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, BENCH_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if v is None else v for k, v in row.items()})
    return 0


def _toy(cfg: RunConfig):
    from .dit_toy.flow import ToyDataset
    from .dit_toy.model import ToyDiT

    data = ToyDataset(side=cfg.train_side, ratio=cfg.train_rho)
    model = ToyDiT(rank=cfg.lora_rank, seed=cfg.seed, dtype=np.dtype(cfg.precision))
    return data, model


def cmd_train(cfg: RunConfig) -> int:
    from .dit_toy.checkpoint import save_checkpoint
    from .dit_toy.flow import TrainConfig, train

    out = _out(cfg)
    data, model = _toy(cfg)
    tc = TrainConfig(steps=cfg.steps, batch=cfg.batch, lr=cfg.learning_rate, seed=cfg.seed)
    try:
        log = train(model, data, data.layout(), tc)
    except StateError as e:
        _say(f"error: {e}")
        return 1
    log.write_csv(out / "train_log.csv")
    save_checkpoint(model, out / "model.ckpt", extra={"steps": cfg.steps, "seed": cfg.seed})
    if log.rows:
        _say(f"train steps={cfg.steps} first_loss={log.rows[0][1]:.6f} final_loss={log.rows[-1][1]:.6f}")
    else:
        _say("train steps=0 (checkpoint holds the initialization)")
    return 0


def write_pgm(grid: np.ndarray, path) -> None:
    """8-bit binary PGM of a 2D array, min-max scaled."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    img = np.zeros(g.shape, np.uint8) if hi == lo else np.round(255 * (g - lo) / (hi - lo)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def cmd_sample(cfg: RunConfig) -> int:
    from .dit_toy.checkpoint import load_checkpoint
    from .dit_toy.flow import euler_sample, recursive_upscale

    out = _out(cfg)
    try:
        model = load_checkpoint(cfg.checkpoint)
    except (OSError, HierAttnError, KeyError, ValueError) as e:
        _say(f"error: incompatible checkpoint {cfg.checkpoint}: {e}")
        return 1
    if model.vocab < 3 or model.channels < 1:
        _say("error: incompatible checkpoint: toy vocabulary expected")
        return 1
    text = np.array([0, 1 + cfg.label])
    base_layout = build_layout(GridSpec(cfg.base_side, cfg.base_side),
                               WindowSpec(min(cfg.window, cfg.base_side), 0), None, text.size)
    x = euler_sample(model, cfg.sample_steps, (text, None), base_layout, seed=cfg.seed)
    levels = [dict(level=0, side=cfg.base_side, seq_len=base_layout.seq_len)]
    if cfg.levels:
        x, reps = recursive_upscale(model, x, cfg.levels, text, ratio=cfg.rho, window=cfg.window,
                                    halo=cfg.halo, steps=cfg.sample_steps, seed=cfg.seed,
                                    on_level=lambda r: _say(json.dumps(r.to_dict())))
        levels += [r.to_dict() for r in reps]
    np.save(out / "sample.npy", x)
    with open(out / "sample_levels.json", "w") as fh:
        json.dump(levels, fh, indent=2)
    if cfg.pgm:
        write_pgm(x[..., 0], out / "sample.pgm")
    _say(f"sample grid {x.shape[0]}x{x.shape[1]} written to {out / 'sample.npy'}")
    return 0


HANDLERS = {"mask": cmd_mask, "verify": cmd_verify, "bench": cmd_bench, "train": cmd_train, "sample": cmd_sample}


# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--rule", action="append", default=argparse.SUPPRESS, metavar="FLAG=VALUE",
                       help="interaction rule override, repeatable")
        for f in fields(RunConfig):
            if f.name == "rules":
                continue
            flag = "--" + f.name.replace("_", "-")
            if f.type == "bool":
                p.add_argument(flag, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
            elif f.name == "sides":
                p.add_argument(flag, "--side", "--sweep", dest="sides", default=argparse.SUPPRESS,
                               help="comma-separated grid sides")
            else:
                p.add_argument(flag, default=argparse.SUPPRESS)
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(threads=_env_threads())
    if getattr(ns, "config", None):
        cfg = RunConfig.parse(Path(ns.config).read_text(), cfg)
    skip = {"command", "config", "rule"}
    raw = {k: v for k, v in vars(ns).items() if k not in skip}
    rules = None
    if hasattr(ns, "rule"):
        rules = dict(cfg.rules)
        for item in ns.rule:
            if "=" not in item:
                raise ConfigError(f"rules: expected FLAG=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            rules[k.strip()] = _rule_value(k.strip(), v.strip())
    return cfg.updated(raw, rules).validate(ns.command)


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(ns)
        return HANDLERS[ns.command](cfg)
    except ConfigError as e:
        print(f"hierattn {ns.command}: invalid configuration: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
