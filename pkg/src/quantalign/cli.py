"""Command-line pipeline driver.

Subcommands compose through files in the run directory only; rerunning a
command with the same config and seed reproduces its outputs byte for byte
(manifest timestamps aside). Every command exits 0 on success, 2 on
configuration problems, 3 on numeric failures, and 4 when an external
service fails; errors print one machine-parseable line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from . import __version__
from .checkpoint_io import (
    checkpoint_content_hash,
    load_checkpoint,
    save_checkpoint,
    save_quantized_checkpoint,
)
from .corpus import Corpus, ingest, load_corpus, save_corpus, synth_restricted
from .decode import DecodeParams, beam_decode, greedy_decode
from .diagnostics import (
    breakdown_suite,
    flip_rate,
    flip_scan,
    margin_stats,
    perplexity,
    write_breakdown_csv,
    write_flips_csv,
    write_margins_csv,
    write_ppl_csv,
)
from .errors import ConfigError, ExternalServiceError, QuantalignError
from .evaluate import (
    JudgeConfig,
    alignment_report,
    judge_many,
    tally_verdicts,
    write_alignment_csv,
    write_verdicts_csv,
)
from .model import ModelCheckpoint, init_checkpoint
from .prefs import build_dataset, load_dataset, save_dataset, verify_theorem_argmax_preference
from .quant import QuantSpec, calibrate_scales, fake_quant_forward
from .runconfig import TINY_PROMPT_BUDGET, RunConfig, apply_tiny_preset
from .train import TrainConfig, train, write_reward_log

# Prompt-pool partition: alignment training prompts come first, held-out
# evaluation prompts after, never overlapping.
DEFAULT_TRAIN_PROMPTS = 2000
DEFAULT_EVAL_PROMPTS = 400
DEFAULT_MARGIN_PROMPTS = 200
BASE_TRAIN_STEPS = 3000
BASE_TRAIN_LR = 1e-3
BASE_TRAIN_BATCH = 8


def _version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        git = desc.stdout.strip() if desc.returncode == 0 else "nogit"
    except (OSError, subprocess.TimeoutExpired):
        git = "nogit"
    return f"quantalign {__version__} ({git})"


class RunDir:
    """Run-directory bookkeeping: layout, config snapshot, manifests."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)

    def prepare(self, command: str, inputs: Sequence[Path] = ()) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        for sub in ("ckpt", "logs", "diag", "eval", "figures", "verify", "manifest"):
            (self.root / sub).mkdir(exist_ok=True)
        snapshot = self.root / "config.snapshot.json"
        if not snapshot.exists():
            self.cfg.save(snapshot)
        manifest = {
            "command": command,
            "argv": sys.argv[1:],
            "version": _version_string(),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "inputs": {
                str(p): hashlib.sha256(Path(p).read_bytes()).hexdigest()
                for p in inputs
                if Path(p).is_file()
            },
        }
        with open(self.root / "manifest" / f"{command.replace(' ', '_')}.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def corpus(self) -> Corpus:
        cdir = self.path("corpus")
        if not (cdir / "manifest.json").is_file():
            raise ConfigError("no prepared corpus in run dir (run `corpus prepare` first)")
        return load_corpus(cdir)

    def checkpoint(self, tag: str) -> ModelCheckpoint:
        path = self.path("ckpt", f"{tag}.ckpt")
        if not path.is_file():
            raise ConfigError(f"missing checkpoint {path} (run the producing command first)")
        return load_checkpoint(path)

    def model_view(self, tag: str) -> ModelCheckpoint:
        """Evaluable model for a tag: latent checkpoints are viewed through
        fake quantization; `base` is the full-precision baseline."""
        if tag == "base":
            return self.checkpoint("base")
        if tag == "rtn":
            base = self.checkpoint("base")
            return fake_quant_forward(base.with_role("quantized_latent"), self.cfg.quant)
        latent = self.checkpoint(tag)
        return fake_quant_forward(latent.with_role("quantized_latent"), self.cfg.quant)


def split_prompts(corpus: Corpus, n_train: int, n_eval: int):
    pool = corpus.prompt_pool
    if len(pool) < n_train + n_eval:
        raise ConfigError(
            f"prompt pool has {len(pool)} prompts, need {n_train}+{n_eval}; "
            "use a larger corpus or fewer prompts"
        )
    return pool[:n_train], pool[n_train : n_train + n_eval]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_corpus_prepare(cfg: RunConfig, args) -> int:
    run = RunDir(cfg)
    inputs = [Path(p) for p in (args.inputs or [cfg.corpus_path])]
    run.prepare("corpus prepare", inputs)
    corpus = ingest(inputs, split_seed=cfg.train.seed)
    save_corpus(corpus, run.path("corpus"))
    print(
        f"corpus prepared: {len(corpus.train_tokens)} train tokens, "
        f"{len(corpus.val_tokens)} val tokens, {len(corpus.prompt_pool)} prompts"
    )
    return 0


def cmd_train_base(cfg: RunConfig, args) -> int:
    run = RunDir(cfg)
    run.prepare("train base")
    corpus = run.corpus()
    steps = args.steps if args.steps is not None else BASE_TRAIN_STEPS
    if args.tiny:
        steps = min(steps, cfg.train.steps)
    conf = TrainConfig(
        learning_rate=args.lr,
        steps=steps,
        batch_size=args.batch_size,
        seed=cfg.train.seed,
        eval_every=max(1, steps // 3),
    )
    init = init_checkpoint(cfg.model, seed=cfg.train.seed)
    result = train(
        conf,
        "lm_pretrain",
        init,
        corpus_tokens=corpus.train_tokens,
        window=cfg.model.max_context,
        checkpoint_dir=run.path("ckpt"),
    )
    save_checkpoint(run.path("ckpt", "base.ckpt"), result.final)
    write_reward_log(result.rows, run.path("logs", "base_loss.csv"))
    val_ppl = perplexity(result.final, corpus.val_tokens[: 20 * cfg.model.max_context])
    print(
        f"base model trained: final loss {result.rows[-1].loss:.4f}, "
        f"val ppl {val_ppl:.3f} -> {run.path('ckpt', 'base.ckpt')}"
    )
    return 0


def cmd_quantize(cfg: RunConfig, args) -> int:
    run = RunDir(cfg)
    run.prepare("quantize")
    base = run.checkpoint("base")
    out = run.path("ckpt", f"rtn.q{cfg.quant.bits}.ckpt")
    save_quantized_checkpoint(out, base, cfg.quant)
    msg = f"quantized checkpoint written: {out}"
    if args.calibrate:
        corpus = run.corpus()
        calib = [corpus.train_tokens[i * 64 : (i + 1) * 64] for i in range(args.calib_samples)]
        scales = calibrate_scales(base, cfg.quant, calib)
        scale_path = run.path("ckpt", "scales.json")
        with open(scale_path, "w") as f:
            json.dump({k: v.tolist() for k, v in scales.items()}, f, sort_keys=True)
            f.write("\n")
        msg += f"; calibration scales -> {scale_path}"
    view = fake_quant_forward(base.with_role("quantized_latent"), cfg.quant)
    print(msg)
    print(f"fake-quant hash {checkpoint_content_hash(view)[:16]}")
    return 0


def cmd_gen_prefs(cfg: RunConfig, args) -> int:
    run = RunDir(cfg)
    run.prepare("gen-prefs")
    corpus = run.corpus()
    base = run.checkpoint("base")
    n_train = args.prompts
    train_prompts, _ = split_prompts(corpus, n_train, args.eval_prompts)
    dataset = build_dataset(
        base,
        base,
        cfg.quant,
        train_prompts,
        cfg.decode,
        workers=args.threads,
        greedy_gap_sample=args.gap_sample,
    )
    out = run.path("prefs")
    out.mkdir(exist_ok=True)
    save_dataset(dataset, out / "dataset.jsonl")
    gap = dataset.provenance.get("greedy_gap_fraction")
    gap_note = "" if gap is None else (
        f"; greedy-gap fraction {gap:.3f} on {dataset.provenance['greedy_gap_sample']} sampled pairs"
    )
    print(
        f"preference dataset: {len(dataset.triplets)} pairs "
        f"({dataset.dropped_identical} identical pairs dropped){gap_note} "
        f"-> {out / 'dataset.jsonl'}"
    )
    return 0


def cmd_align(cfg: RunConfig, args) -> int:
    run = RunDir(cfg)
    run.prepare(f"align {args.method}")
    base = run.checkpoint("base")
    conf = cfg.train
    if args.steps is not None or args.lr is not None:
        conf = TrainConfig(
            learning_rate=args.lr if args.lr is not None else conf.learning_rate,
            steps=args.steps if args.steps is not None else conf.steps,
            batch_size=conf.batch_size,
            seed=conf.seed,
            optimizer=conf.optimizer,
            eval_every=conf.eval_every,
        )
    beta = args.beta if args.beta is not None else cfg.beta
    if args.method in ("qdpo", "dpo"):
        ds_path = run.path("prefs", "dataset.jsonl")
        if not ds_path.is_file():
            raise ConfigError("no preference dataset (run `gen-prefs` first)")
        dataset = load_dataset(ds_path)
        if args.method == "qdpo":
            result = train(
                conf, "qdpo", base, dataset=dataset, quant_spec=cfg.quant, beta=beta,
            )
        else:
            reference = fake_quant_forward(base.with_role("quantized_latent"), cfg.quant)
            result = train(
                conf, "dpo", base, dataset=dataset, reference=reference, beta=beta,
            )
    else:  # kd
        corpus = run.corpus()
        result = train(
            conf,
            "kd",
            base,
            teacher=base,
            quant_spec=cfg.quant,
            corpus_tokens=corpus.train_tokens,
            window=cfg.model.max_context,
        )
    save_checkpoint(run.path("ckpt", f"{args.method}.ckpt"), result.final)
    write_reward_log(result.rows, run.path("logs", f"{args.method}_rewards.csv"))
    last = result.rows[-1]
    print(
        f"{args.method} aligned for {conf.steps} steps: loss {last.loss:.4f} "
        f"margin {last.margin:.4f} -> {run.path('ckpt', args.method + '.ckpt')}"
    )
    return 0


def cmd_diagnose(cfg: RunConfig, args) -> int:
    run = RunDir(cfg)
    run.prepare(f"diagnose {args.what}")
    corpus = run.corpus()
    _, eval_prompts = split_prompts(corpus, args.train_prompts, args.prompts)
    fp = run.checkpoint("base")

    if args.what == "breakdown":
        q = run.model_view(args.model)
        rows, records = breakdown_suite(
            fp, q, eval_prompts, cfg.decode, min_divergent=args.min_divergent,
            workers=args.threads,
        )
        write_breakdown_csv(rows, run.path("diag", "breakdown.csv"))
        n_div = len({r.prompt_id for r in rows})
        print(
            f"breakdown over {n_div} divergent prompts "
            f"({len(records)} scanned) -> {run.path('diag', 'breakdown.csv')}"
        )
    elif args.what == "margins":
        reports = {}
        for tag in args.models.split(","):
            model = run.model_view(tag.strip())
            reports[tag.strip()] = margin_stats(
                model, eval_prompts[: args.margin_prompts], cfg.decode, workers=args.threads
            )
        write_margins_csv(reports, run.path("diag", "margins.csv"))
        gaps = {t: f"{r.mean_gap:.4f}" for t, r in reports.items()}
        print(f"mean top1-top2 gaps {gaps} -> {run.path('diag', 'margins.csv')}")
    elif args.what == "flips":
        q = run.model_view(args.model)
        if args.num_beams > 1:
            beam_params = DecodeParams(
                max_new_tokens=cfg.decode.max_new_tokens,
                num_beams=args.num_beams,
                eos_token=cfg.decode.eos_token,
                topk_logged=cfg.decode.topk_logged,
            )
            records = _beam_flip_scan(fp, q, eval_prompts, beam_params)
            out = run.path("diag", f"flips_beam{args.num_beams}.csv")
        else:
            records = flip_scan(fp, q, eval_prompts, cfg.decode, workers=args.threads)
            out = run.path("diag", "flips.csv")
        write_flips_csv(records, out)
        print(f"flip rate {flip_rate(records):.4f} over {len(records)} prompts -> {out}")
    elif args.what == "ppl":
        values = {}
        toks = corpus.val_tokens[: args.ppl_tokens]
        for tag in args.models.split(","):
            tag = tag.strip()
            try:
                model = run.model_view(tag)
            except ConfigError:
                continue
            values[tag] = perplexity(model, toks)
        write_ppl_csv(values, run.path("diag", "ppl.csv"))
        print(f"perplexities {values} -> {run.path('diag', 'ppl.csv')}")
    else:
        raise ConfigError(f"unknown diagnostic {args.what!r}")
    return 0


def _beam_flip_scan(fp, q, prompts, params):
    """First-divergence between the two models' beam outputs (reported, not
    asserted: wider beams do not repair flipping)."""
    from .diagnostics import DivergenceRecord
    from .prefs import first_divergence_index

    records = []
    for prompt in prompts:
        a = beam_decode(fp, prompt, params)
        b = beam_decode(q, prompt, params)
        idx = first_divergence_index(a.tokens(), b.tokens())
        records.append(DivergenceRecord(prompt=tuple(prompt), divergence_index=idx))
    return records


def cmd_verify_theorem1(cfg: RunConfig, args) -> int:
    run = RunDir(cfg)
    run.prepare("verify theorem1")
    corpus, _source = synth_restricted(args.vocab, n_sequences=200, seed=cfg.train.seed)
    from .model import ModelConfig

    rcfg = ModelConfig(
        vocab_size=args.vocab, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_context=16
    )
    failures = 0
    lines = ["seed,bits,holds,margin,prob"]
    start = time.time()
    for seed in range(args.seeds):
        fp = init_checkpoint(rcfg, seed=seed, zero_residual_projections=False)
        bits = (2, 3, 4)[seed % 3]
        q = fake_quant_forward(fp.with_role("quantized_latent"), QuantSpec(bits=bits))
        prompt = corpus.prompt_pool[seed % len(corpus.prompt_pool)][:2]
        res = verify_theorem_argmax_preference(fp, q, prompt, max_len=args.max_len, beta=cfg.beta)
        failures += not res.holds
        lines.append(f"{seed},{bits},{int(res.holds)},{res.margin:.10g},{res.prob:.10g}")
    out = run.path("verify", "theorem1.csv")
    out.write_text("\n".join(lines) + "\n")
    elapsed = time.time() - start
    print(
        f"argmax-preference guarantee: {args.seeds - failures}/{args.seeds} hold "
        f"({elapsed:.1f}s) -> {out}"
    )
    if failures:
        print(f"quantalign: error code=3 kind=verify detail={failures} counterexamples",
              file=sys.stderr)
        return 3
    return 0


def cmd_eval_report(cfg: RunConfig, args) -> int:
    run = RunDir(cfg)
    run.prepare("eval report")
    corpus = run.corpus()
    _, eval_prompts = split_prompts(corpus, args.train_prompts, args.prompts)
    fp = run.checkpoint("base")
    candidate = run.model_view(args.candidate)
    report = alignment_report(
        fp, candidate, eval_prompts, cfg.decode,
        ppl_tokens=corpus.val_tokens[: args.ppl_tokens],
    )
    out = run.path("eval", f"alignment_{args.candidate}.csv")
    write_alignment_csv(report, out)
    print(
        f"{args.candidate}: mean ROUGE-L vs fp {report.mean_rougeL:.4f}, "
        f"flip rate {report.flip_rate:.4f}, margin gap {report.mean_margin_gap:.4f}, "
        f"ppl {report.ppl:.3f} -> {out}"
    )
    return 0


def cmd_eval_judge(cfg: RunConfig, args) -> int:
    run = RunDir(cfg)
    run.prepare("eval judge")
    corpus = run.corpus()
    _, eval_prompts = split_prompts(corpus, args.train_prompts, args.prompts)
    fp = run.checkpoint("base")
    candidate = run.model_view(args.candidate)
    items = []
    for prompt in eval_prompts:
        a = greedy_decode(candidate, prompt, cfg.decode)
        b = greedy_decode(fp, prompt, cfg.decode)
        items.append((bytes(prompt).decode("utf-8", "replace"), a.text(), b.text()))
    judge_cfg = JudgeConfig.from_env(
        tie_rule=args.tie_rule,
        transcript_path=str(run.path("eval", "judge_transcript.jsonl")),
    )
    verdicts = judge_many(judge_cfg, items, workers=args.threads)
    write_verdicts_csv(verdicts, run.path("eval", "verdicts.csv"))
    tally = tally_verdicts(verdicts)
    print(f"judge tally for {args.candidate} vs base: {tally}")
    return 0


def cmd_report_figures(cfg: RunConfig, args) -> int:
    run = RunDir(cfg)
    run.prepare("report figures")
    wrote = []

    breakdown = run.path("diag", "breakdown.csv")
    if breakdown.is_file():
        rows = breakdown.read_text().splitlines()[1:]
        agg: Dict[int, List[List[float]]] = {i: [] for i in range(1, 9)}
        for line in rows:
            pid, cid, r1, r2, rl = line.split(",")
            agg[int(cid)].append([float(r1), float(r2), float(rl)])
        out = run.path("figures", "breakdown_cases.csv")
        with open(out, "w") as f:
            f.write("case_id,n,mean_rouge1,mean_rouge2,mean_rougeL\n")
            for cid in range(1, 9):
                vals = agg[cid]
                if not vals:
                    continue
                n = len(vals)
                means = [sum(v[i] for v in vals) / n for i in range(3)]
                f.write(f"{cid},{n},{means[0]:.10g},{means[1]:.10g},{means[2]:.10g}\n")
        wrote.append(out)

    rewards = run.path("logs", "qdpo_rewards.csv")
    if rewards.is_file():
        out = run.path("figures", "training_dynamics.csv")
        lines = rewards.read_text().splitlines()
        with open(out, "w") as f:
            f.write("step,loss,chosen_reward,rejected_reward,margin\n")
            for line in lines[1:]:
                f.write(line + "\n")
        wrote.append(out)

    margins = run.path("diag", "margins.csv")
    if margins.is_file():
        by_tag: Dict[str, List[float]] = {}
        for line in margins.read_text().splitlines()[1:]:
            pid, gap, tag = line.split(",")
            by_tag.setdefault(tag, []).append(float(gap))
        out = run.path("figures", "margin_gaps.csv")
        with open(out, "w") as f:
            f.write("model_tag,n,mean_gap\n")
            for tag in sorted(by_tag):
                vals = by_tag[tag]
                f.write(f"{tag},{len(vals)},{sum(vals) / len(vals):.10g}\n")
        wrote.append(out)

    if not wrote:
        raise ConfigError("no diagnostic CSVs found to merge (run diagnose/align first)")
    print("figure data written: " + ", ".join(str(w) for w in wrote))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quantalign",
        description="Diagnose and repair token-flipping in weight-quantized language models.",
    )
    parser.add_argument("--config", default=None, help="run config JSON (default: built-in)")
    parser.add_argument("--out-dir", default=None, help="override the run directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for prompt-parallel stages and torch")
    parser.add_argument("--tiny", action="store_true",
                        help="CI preset: small model, short runs, few prompts")
    sub = parser.add_subparsers(dest="group", required=True)

    corpus = sub.add_parser("corpus", help="corpus management").add_subparsers(
        dest="sub", required=True
    )
    prep = corpus.add_parser("prepare", help="ingest text and write splits")
    prep.add_argument("--inputs", nargs="+", default=None, help="UTF-8 text files")

    tr = sub.add_parser("train", help="training").add_subparsers(dest="sub", required=True)
    base = tr.add_parser("base", help="pretrain the full-precision baseline")
    base.add_argument("--steps", type=int, default=None)
    base.add_argument("--lr", type=float, default=BASE_TRAIN_LR)
    base.add_argument("--batch-size", type=int, default=BASE_TRAIN_BATCH)

    quant = sub.add_parser("quantize", help="write the round-to-nearest checkpoint")
    quant.add_argument("--calibrate", action="store_true",
                       help="grid-search per-channel scales on calibration text")
    quant.add_argument("--calib-samples", type=int, default=8)

    prefs = sub.add_parser("gen-prefs", help="build the preference dataset")
    prefs.add_argument("--prompts", type=int, default=DEFAULT_TRAIN_PROMPTS)
    prefs.add_argument("--eval-prompts", type=int, default=DEFAULT_EVAL_PROMPTS)
    prefs.add_argument("--gap-sample", type=int, default=100,
                       help="pairs sampled for the greedy-gap diagnostic (0 disables)")

    align = sub.add_parser("align", help="alignment training")
    align.add_argument("method", choices=["qdpo", "dpo", "kd"])
    align.add_argument("--steps", type=int, default=None)
    align.add_argument("--lr", type=float, default=None)
    align.add_argument("--beta", type=float, default=None)

    diag = sub.add_parser("diagnose", help="measurement suite")
    diag.add_argument("what", choices=["breakdown", "margins", "flips", "ppl"])
    diag.add_argument("--model", default="rtn", help="quantized-side model tag")
    diag.add_argument("--models", default="base,rtn", help="comma-separated tags")
    diag.add_argument("--prompts", type=int, default=DEFAULT_EVAL_PROMPTS)
    diag.add_argument("--train-prompts", type=int, default=DEFAULT_TRAIN_PROMPTS)
    diag.add_argument("--margin-prompts", type=int, default=DEFAULT_MARGIN_PROMPTS)
    diag.add_argument("--min-divergent", type=int, default=300)
    diag.add_argument("--num-beams", type=int, default=1)
    diag.add_argument("--ppl-tokens", type=int, default=20_000)

    verify = sub.add_parser("verify", help="exhaustive checks").add_subparsers(
        dest="sub", required=True
    )
    thm = verify.add_parser("theorem1", help="argmax-preference guarantee sweep")
    thm.add_argument("--seeds", type=int, default=200)
    thm.add_argument("--vocab", type=int, default=6)
    thm.add_argument("--max-len", type=int, default=4)

    ev = sub.add_parser("eval", help="alignment evaluation").add_subparsers(
        dest="sub", required=True
    )
    rep = ev.add_parser("report", help="automatic alignment metrics")
    rep.add_argument("--candidate", default="rtn")
    rep.add_argument("--prompts", type=int, default=DEFAULT_EVAL_PROMPTS)
    rep.add_argument("--train-prompts", type=int, default=DEFAULT_TRAIN_PROMPTS)
    rep.add_argument("--ppl-tokens", type=int, default=20_000)
    judge = ev.add_parser("judge", help="external pairwise judging")
    judge.add_argument("--candidate", default="qdpo")
    judge.add_argument("--prompts", type=int, default=80)
    judge.add_argument("--train-prompts", type=int, default=DEFAULT_TRAIN_PROMPTS)
    judge.add_argument("--tie-rule", choices=["modified", "original"], default="modified")

    report = sub.add_parser("report", help="figure-ready data").add_subparsers(
        dest="sub", required=True
    )
    report.add_parser("figures", help="merge CSVs into per-figure tables")

    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.tiny:
        cfg = apply_tiny_preset(cfg)
    return cfg


def _tiny_prompt_budgets(args) -> None:
    for attr in ("prompts", "train_prompts"):
        if hasattr(args, attr):
            current = getattr(args, attr)
            cap = TINY_PROMPT_BUDGET if attr != "train_prompts" else TINY_PROMPT_BUDGET
            setattr(args, attr, min(current, cap))
    if hasattr(args, "min_divergent"):
        args.min_divergent = min(args.min_divergent, 50)
    if hasattr(args, "margin_prompts"):
        args.margin_prompts = min(args.margin_prompts, 50)
    if hasattr(args, "eval_prompts"):
        args.eval_prompts = min(args.eval_prompts, 100)
    if hasattr(args, "seeds"):
        args.seeds = min(args.seeds, 25)
    if hasattr(args, "ppl_tokens"):
        args.ppl_tokens = min(args.ppl_tokens, 5_000)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        cfg = _resolve_config(args)
        if args.tiny:
            _tiny_prompt_budgets(args)
        handler = {
            ("corpus", "prepare"): cmd_corpus_prepare,
            ("train", "base"): cmd_train_base,
            ("quantize", None): cmd_quantize,
            ("gen-prefs", None): cmd_gen_prefs,
            ("align", None): cmd_align,
            ("diagnose", None): cmd_diagnose,
            ("verify", "theorem1"): cmd_verify_theorem1,
            ("eval", "report"): cmd_eval_report,
            ("eval", "judge"): cmd_eval_judge,
            ("report", "figures"): cmd_report_figures,
        }[(args.group, getattr(args, "sub", None))]
        return handler(cfg, args)
    except QuantalignError as e:
        print(
            f"quantalign: error code={e.exit_code} kind={e.kind} detail={e}",
            file=sys.stderr,
        )
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
