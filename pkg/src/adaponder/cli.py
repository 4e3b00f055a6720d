"""Command-line entry point: ``adaponder {train,eval,generate,analyze,inspect,...}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import torch

from . import __version__
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .config import ModelConfig, PonderSettings, TrainConfig, from_dict, to_dict
from .data import (as_tensor, corpus_hash, eval_chunks, load_corpus, split_corpus,
                   toy_corpus)
from .errors import ConfigError, PonderError
from .inference import (ADAPTIVE_DEPTH, FULL_DEPTH, FlopsQuery, Sampling, evaluate_perplexity,
                        flops_estimate, generate, write_records)
from .model import init_parameters

log = logging.getLogger("adaponder")

SECTIONS = {"model": ModelConfig, "ponder": PonderSettings, "train": TrainConfig}
DATA_KEYS = {"path": "data_path", "heldout_fraction": "heldout_fraction"}


# -- configuration ----------------------------------------------------------

def parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(raw: dict[str, dict[str, Any]], item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or parts[0] not in (*SECTIONS, "data"):
        raise ConfigError(f"unknown override key {key.strip()!r}")
    raw.setdefault(parts[0], {})[parts[1]] = parse_value(value.strip())


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    ponder: PonderSettings
    train: TrainConfig

    def as_dict(self) -> dict[str, Any]:
        train = to_dict(self.train)
        data = {"path": train.pop("data_path"), "heldout_fraction": train.pop("heldout_fraction")}
        return {"model": to_dict(self.model), "ponder": to_dict(self.ponder), "train": train,
                "data": data}


def resolve_config(raw: dict[str, Any], seed: int | None = None) -> RunConfig:
    unknown = sorted(set(raw) - {*SECTIONS, "data"})
    if unknown:
        raise ConfigError(f"unknown config section {unknown[0]!r}")
    for name, section in raw.items():
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be a table")
    train = dict(raw.get("train", {}))
    for key, value in raw.get("data", {}).items():
        if key not in DATA_KEYS:
            raise ConfigError(f"unknown key data.{key}")
        train[DATA_KEYS[key]] = value
    model = dict(raw.get("model", {}))
    if seed is not None:
        model["seed"] = seed
        train["seed"] = seed
    try:
        return RunConfig(
            model=from_dict(ModelConfig, model, "model"),
            ponder=from_dict(PonderSettings, dict(raw.get("ponder", {})), "ponder"),
            train=from_dict(TrainConfig, train, "train"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | None, overrides: list[str], seed: int | None = None) -> RunConfig:
    raw: dict[str, Any] = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path!r} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path!r}: {exc}") from None
    for item in overrides:
        apply_override(raw, item)
    return resolve_config(raw, seed)


def defaults_toml() -> str:
    """The documented default configuration as TOML."""
    cfg = RunConfig(ModelConfig(), PonderSettings(), TrainConfig()).as_dict()
    lines = []
    for section, values in cfg.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)


# -- manifest ----------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: Path, manifest: dict[str, Any]) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override, args.seed)
    if not cfg.train.data_path:
        raise ConfigError("missing required key data.path")
    data = load_corpus(cfg.train.data_path)
    train_part, heldout = split_corpus(data, cfg.train.heldout_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["checkpoint.plm3", "metrics.csv"]
    if cfg.train.eval_interval:
        outputs.append("train_eval.csv")
    manifest = {
        "config": cfg.as_dict(),
        "seed": cfg.train.seed,
        "corpus_sha256": corpus_hash(data),
        "corpus_bytes": len(data),
        "split": {"train_bytes": len(train_part), "heldout_bytes": len(heldout)},
        "tool_version": __version__,
        "started": _now(),
        "outputs": outputs,
        "status": "running",
    }
    write_manifest(out / "manifest.json", manifest)

    model = init_parameters(cfg.model, cfg.ponder)
    eval_rows: list[list[Any]] = []
    chunks = eval_chunks(heldout, cfg.train.seq_len, cfg.train.eval_tokens)

    def on_eval(step, m):
        for mode, settings, depth in _eval_modes(cfg.ponder, args.eval_modes):
            res = evaluate_perplexity(m, chunks, settings, depth=depth)
            eval_rows.append([step, mode, f"{res.ppl:.6g}", f"{res.avg_steps:.6g}"])
            log.info("eval step %d %s ppl %.4f avg_steps %.3f", step, mode, res.ppl, res.avg_steps)
        m.train()

    from .training import train

    try:
        train(model, as_tensor(train_part), cfg.ponder, cfg.train,
              metrics_path=out / "metrics.csv", on_eval=on_eval)
        save_checkpoint(model, cfg.ponder, out / "checkpoint.plm3",
                        extra={"train": to_dict(cfg.train), "corpus_sha256": corpus_hash(data)})
        if cfg.train.eval_interval:
            with open(out / "train_eval.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "mode", "ppl", "avg_steps"])
                w.writerows(eval_rows)
    except BaseException:
        manifest.update(status="failed", finished=_now())
        write_manifest(out / "manifest.json", manifest)
        raise
    missing = [name for name in outputs if not (out / name).exists()]
    manifest.update(status="failed" if missing else "ok", finished=_now())
    write_manifest(out / "manifest.json", manifest)
    if missing:
        raise PonderError(f"declared outputs not produced: {', '.join(missing)}")
    print(f"wrote {out / 'checkpoint.plm3'}")
    return 0


def _eval_modes(ponder: PonderSettings, modes: list[str]):
    for mode in modes:
        if mode == "adaptive":
            yield mode, ponder, ADAPTIVE_DEPTH
        elif mode == "full":
            yield mode, ponder, FULL_DEPTH
        elif mode == "fixed":
            yield mode, ponder.replace(mode="fixed"), ADAPTIVE_DEPTH
        else:
            raise ConfigError(f"unknown evaluation mode {mode!r}")


def _load(args):
    ckpt = load_checkpoint(args.checkpoint, max_steps=getattr(args, "expect_max_steps", None))
    return ckpt, ckpt.build_model()


def _chunks(args, ckpt, data: bytes):
    chunk_len = args.chunk_len or ckpt.extra.get("train", {}).get("seq_len", 64)
    return eval_chunks(data, chunk_len, args.max_tokens)


def _corpus(args) -> bytes:
    data = load_corpus(args.corpus)
    if args.heldout:
        data = split_corpus(data, args.heldout_fraction)[1]
    return data


def cmd_eval(args) -> int:
    ckpt, model = _load(args)
    chunks = _chunks(args, ckpt, _corpus(args))
    tau = args.tau if args.tau is not None else ckpt.ponder.tau
    ponder = ckpt.ponder.replace(tau=tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode, settings, depth in _eval_modes(ponder, args.mode):
        res = evaluate_perplexity(model, chunks, settings, depth=depth)
        flops = flops_estimate(FlopsQuery(model.n_params, res.n_tokens, res.avg_steps))
        rows.append([mode, f"{res.ppl:.6g}", f"{res.avg_steps:.6g}", f"{flops.per_token:.6g}"])
        print(f"{mode}: ppl={res.ppl:.4f} avg_steps={res.avg_steps:.4f} "
              f"flops/token={flops.per_token:.4g} tokens={res.n_tokens}")
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "ppl", "avg_steps", "flops_per_token"])
        w.writerows(rows)
    return 0


def cmd_generate(args) -> int:
    ckpt, model = _load(args)
    sampling = Sampling(temperature=0.0 if args.greedy else args.temperature, seed=args.seed)
    text, records = generate(model, args.prompt, args.max_new, ckpt.ponder, sampling)
    sys.stdout.write(text.decode("utf-8", errors="replace"))
    sys.stdout.write("\n" if text else "")
    if args.records:
        write_records(args.records, records, ckpt.ponder.max_steps)
    return 0


def parse_alphas(text: str) -> list[float]:
    """``start:end:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            start, end, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(round((end - start) / step))
            values = [round(start + i * step, 10) for i in range(n + 1)]
            return [v for v in values if v <= end + 1e-9]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad alpha grid {text!r}; expected start:end:step") from None


def cmd_analyze(args) -> int:
    from . import analysis

    ckpt, model = _load(args)
    chunks = _chunks(args, ckpt, _corpus(args))
    K = ckpt.ponder.max_steps
    settings = ckpt.ponder
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta: dict[str, Any] = {"subcommand": args.what, "checkpoint": str(args.checkpoint),
                            "corpus": str(args.corpus), "tokens": sum(len(c) - 1 for c in chunks),
                            "bucket_rule": "tertiles of step-0 NLL, ties by position",
                            "loss": "mean token NLL"}
    if args.what == "difficulty":
        recs = analysis.intrinsic_difficulty(model, chunks, settings)
        buckets = analysis.difficulty_buckets([r.l_t for r in recs])
        reports = analysis.marginal_utility(recs, buckets)
        analysis.write_difficulty(out / "difficulty.csv", recs, K)
        analysis.write_marginal(out / "marginal.csv", reports)
        meta["spearman_l_khat"] = analysis.spearman_difficulty_steps(recs)
        if args.svg:
            from . import plots

            plots.plot_marginal(out / "marginal.svg", reports)
            plots.plot_difficulty(out / "difficulty.svg", recs)
    elif args.what == "counterfactual":
        rows = analysis.counterfactual_sweep(model, chunks, settings, parse_alphas(args.alphas))
        analysis.write_counterfactual(out / "counterfactual.csv", rows)
        if args.svg:
            from . import plots

            plots.plot_counterfactual(out / "counterfactual.svg", rows)
    elif args.what == "convergence":
        fit = analysis.jacobi_convergence(model, chunks, settings, args.n, reference=args.reference)
        analysis.write_convergence(out / "convergence.csv", fit)
        meta["fit"] = {"A": fit.amplitude, "L": fit.contraction, "R2": fit.r2,
                       "reference": fit.reference}
        print(fit.summary())
        if args.svg:
            from . import plots

            plots.plot_convergence(out / "convergence.svg", fit)
    elif args.what == "tokens":
        res = evaluate_perplexity(model, chunks, settings)
        stats = analysis.token_step_stats(res.records, K)
        analysis.write_token_stats(out / "token_stats.csv", stats, K)
    (out / f"{args.what}_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {args.what} outputs to {out}")
    return 0


def cmd_inspect(args) -> int:
    header, payload = read_header(args.checkpoint)
    header["payload_bytes_on_disk"] = len(payload)
    print(json.dumps(header, indent=2, sort_keys=True))
    return 0


def cmd_make_corpus(args) -> int:
    Path(args.out).write_bytes(toy_corpus(args.bytes, args.seed))
    print(f"wrote {args.bytes} bytes to {args.out}")
    return 0


def cmd_defaults(args) -> int:
    print(defaults_toml(), end="")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaponder", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a TOML config")
    t.add_argument("--config")
    t.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="run")
    t.add_argument("--eval-modes", nargs="+", default=["adaptive"],
                   choices=["adaptive", "full", "fixed"])
    t.set_defaults(func=cmd_train)

    def add_corpus_args(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--corpus", required=True)
        q.add_argument("--heldout", action="store_true",
                       help="use only the held-out tail split of the corpus")
        q.add_argument("--heldout-fraction", type=float, default=0.1)
        q.add_argument("--chunk-len", type=int, default=0)
        q.add_argument("--max-tokens", type=int, default=4096)
        q.add_argument("--expect-max-steps", type=int)
        q.add_argument("--out", default=".")

    e = sub.add_parser("eval", help="perplexity, executed steps and FLOPs")
    add_corpus_args(e)
    e.add_argument("--mode", nargs="+", default=["adaptive"], choices=["adaptive", "full", "fixed"])
    e.add_argument("--tau", type=float)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="sample text with adaptive pondering")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prompt", default="")
    g.add_argument("--max-new", type=int, default=64)
    g.add_argument("--greedy", action="store_true")
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--records")
    g.add_argument("--expect-max-steps", type=int)
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("analyze", help="difficulty / counterfactual / convergence / token stats")
    a.add_argument("what", choices=["difficulty", "counterfactual", "convergence", "tokens"])
    add_corpus_args(a)
    a.add_argument("--alphas", default="-3:3:1")
    a.add_argument("--n", type=int, default=8)
    a.add_argument("--reference", choices=["sequential", "jacobi"], default="sequential")
    a.add_argument("--svg", action="store_true")
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("inspect", help="print a checkpoint header")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("make-corpus", help="write the synthetic toy corpus")
    c.add_argument("--out", required=True)
    c.add_argument("--bytes", type=int, default=1 << 20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_make_corpus)

    d = sub.add_parser("defaults", help="print the default configuration as TOML")
    d.set_defaults(func=cmd_defaults)
    return p


def _join_negative_values(argv: list[str]) -> list[str]:
    """Let ``--alphas -2:2:0.5`` through; argparse would read the grid as a flag."""
    out: list[str] = []
    it = iter(argv)
    for item in it:
        if item == "--alphas":
            value = next(it, None)
            out.append(item if value is None else f"--alphas={value}")
        else:
            out.append(item)
    return out


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_join_negative_values(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        with torch.set_grad_enabled(args.command == "train"):
            return args.func(args)
    except PonderError as exc:
        print(f"error[{exc.category}]: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[io]: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
