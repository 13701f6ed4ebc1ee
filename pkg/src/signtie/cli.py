"""Command-line interface.

Exit codes: 0 on success, 1 when some utterance could not be recognized,
2 on usage or data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import BundleError, ModelBundle, config_hash
from .decoder import BeamConfig, DecodeError, DecodeNetwork, PruneStats, decode
from .epenthesis import tie_transitions, train_transitions
from .frames import FRAME_DIM, DataError, GestureSequence, NormalizationStats, normalize_frame, read_jsonl, write_jsonl
from .hmm import TrainingError, fit_hmm, select_state_count
from .isolated import GateConfig, active_candidates, recognize_isolated
from .lm import BigramLM, estimate_bigram
from .metrics import ErrorCounts, align, word_correct_rate
from .synth import SynthConfig, make_vocab, sample_isolated_set, sample_sentence
from .tying import OpCounter, cluster_stream_states, max_pattern_counts, score_tables

log = logging.getLogger("signtie")

OK, RECOGNITION_FAILURE, USAGE_ERROR = 0, 1, 2

# --patterns is given as Lp,Lo,Ls,Rp,Ro,Rs; the frame layout orders streams
# right-shape, left-shape, right-position, left-position, right-orientation,
# left-orientation
_PATTERN_ORDER = (5, 2, 3, 0, 4, 1)


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------------


def _pmap(fn, items, jobs: int, initializer=None, initargs=()):
    """Ordered map, in-process for ``jobs <= 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs, initializer=initializer, initargs=initargs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _write_json(path, obj) -> None:
    if path is None or str(path) == "-":
        json.dump(obj, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _write_lines(path, records) -> None:
    text = "".join(json.dumps(r) + "\n" for r in records)
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _load_dataset(path, bundle: ModelBundle | None = None):
    data = read_jsonl(path)
    if len(data) == 0:
        raise DataError(f"{path}: dataset is empty")
    if bundle is not None:
        if sum(bundle.layout.dims) != FRAME_DIM:
            raise DataError(f"model layout has {sum(bundle.layout.dims)} components, data has {FRAME_DIM}")
        if bundle.provenance.get("normalized"):
            data.sequences = [GestureSequence(normalize_frame(s.frames, bundle.norm), s.label) for s in data]
    return data


def _int_pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected two comma-separated integers") from None
    if not 1 <= a <= b:
        raise argparse.ArgumentTypeError("need 1 <= min <= max")
    return a, b


def _patterns(text: str):
    if text == "max":
        return "max"
    try:
        vals = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("patterns are six comma-separated integers or 'max'") from None
    if len(vals) == 1:
        vals = vals * 6
    if len(vals) != 6 or min(vals) < 1:
        raise argparse.ArgumentTypeError("need six positive pattern counts (Lp,Lo,Ls,Rp,Ro,Rs)")
    return tuple(vals[i] for i in _PATTERN_ORDER)


def _beams(args) -> BeamConfig:
    return BeamConfig(state_beam=args.state_beam, sign_beam=args.sign_beam,
                      unit_threshold=args.unit_threshold, lookahead_beam=args.lookahead_beam)


def _network(bundle: ModelBundle, args) -> DecodeNetwork:
    lm = bundle.lm
    if lm is None:
        log.warning("model has no language model; using a uniform bigram")
        lm = BigramLM.uniform(bundle.signs)
    lm = lm.with_weights(args.lm_scale, args.insertion_penalty)
    mode = args.transitions or ("model" if bundle.transitions else "interpolate")
    if mode == "model":
        trans = bundle.transition_spec()
        if trans is None:
            raise UsageError("model has no transition models; run train-transitions or pick another --transitions")
    elif mode == "interpolate":
        trans = "interpolate"
    else:
        trans = None
    return DecodeNetwork(bundle.model_set(), lm, trans)


# -- commands ------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_signs=args.signs, n_states=args.states, n_mix=args.mixtures,
                      separation=args.separation, seed=args.seed)
    gt, lm = make_vocab(cfg)
    rng = np.random.default_rng([args.seed, 1])
    if args.sentences:
        seqs = [sample_sentence(gt, lm, not args.no_epenthesis, args.length, rng,
                                cfg.epenthesis_self_loop) for _ in range(args.sentences)]
    else:
        seqs = sample_isolated_set(gt, args.reps, rng)
    write_jsonl(args.out, seqs)
    if args.truth:
        prov = {"command": "synth", "seed": args.seed, "config": cfg.to_dict(),
                "config_hash": config_hash(cfg.to_dict())}
        ModelBundle(tuple(gt), lm=lm, provenance=prov).save(args.truth)
    log.info("wrote %d sequences to %s", len(seqs), args.out)
    return OK


def _fit_one(job):
    sign, frames, states, mixtures, seed = job
    seqs = [np.asarray(f) for f in frames]
    n = select_state_count(seqs, mixtures, seed=seed) if states == "auto" else int(states)
    hmm, _ = fit_hmm(seqs, n, mixtures, sign=sign, seed=seed)
    return hmm


def cmd_train(args) -> int:
    data = _load_dataset(args.dataset)
    norm = NormalizationStats.fit(np.concatenate([s.frames for s in data])) if args.normalize else NormalizationStats.identity()
    if args.normalize:
        data.sequences = [GestureSequence(normalize_frame(s.frames, norm), s.label) for s in data]
    groups: dict[str, list[np.ndarray]] = {}
    sentences = []
    for s in data:
        if len(s.signs) == 1:
            groups.setdefault(s.signs[0], []).append(s.frames)
        elif len(s.signs) > 1:
            sentences.append(s.signs)
    if not groups:
        raise DataError(f"{args.dataset}: no single-sign sequences to train on")
    signs = sorted(groups)
    jobs = [(w, groups[w], args.states, args.mixtures, args.seed + i) for i, w in enumerate(signs)]
    models = _pmap(_fit_one, jobs, args.jobs)
    if args.lm_from:
        lm = ModelBundle.load(args.lm_from).lm
        if lm is None or set(lm.vocab) != set(signs):
            raise DataError(f"{args.lm_from}: language model vocabulary does not match the trained signs")
    elif sentences:
        lm = estimate_bigram([x for x in sentences if set(x) <= set(signs)], signs)
    else:
        lm = BigramLM.uniform(signs)
    prov = {"command": "train", "seed": args.seed, "states": args.states, "mixtures": args.mixtures,
            "normalized": bool(args.normalize)}
    prov["config_hash"] = config_hash(prov)
    ModelBundle(tuple(models), norm=norm, lm=lm, provenance=prov).save(args.out)
    log.info("trained %d sign models", len(models))
    return OK


def cmd_tie(args) -> int:
    bundle = ModelBundle.load(args.model)
    K = max_pattern_counts(bundle.models) if args.patterns == "max" else args.patterns
    tms = cluster_stream_states(bundle.models, K, seed=args.seed, layout=bundle.layout)
    prov = dict(bundle.provenance, tie={"patterns": list(tms.codebook.sizes), "seed": args.seed})
    replace(bundle.with_tying(tms), provenance=prov).save(args.out)
    log.info("pattern counts per stream: %s", tms.codebook.sizes)
    return OK


def cmd_train_transitions(args) -> int:
    bundle = ModelBundle.load(args.model)
    data = _load_dataset(args.dataset, bundle)
    sents = [s for s in data if len(s.signs) > 1]
    if not sents:
        raise DataError(f"{args.dataset}: no multi-sign sentences to train transition models on")
    trained, report = train_transitions(sents, bundle.models, n_states=args.states, max_iter=args.iterations,
                                        min_occupancy=args.min_occupancy, prior_weight=args.prior_weight)
    if args.tie:
        shared, mapping = tie_transitions(trained, args.tie, seed=args.seed)
    else:
        pairs = sorted(trained)
        shared, mapping = [trained[p] for p in pairs], {p: i for i, p in enumerate(pairs)}
    prov = dict(bundle.provenance, transitions={
        "states": args.states, "tie": args.tie, "prior_weight": args.prior_weight,
        "min_occupancy": args.min_occupancy, "pairs": len(trained), "untrained": len(report.untrained),
        "loglik": report.history})
    replace(bundle, transitions=tuple(shared), transition_map=mapping, provenance=prov).save(args.out)
    log.info("%d transition pairs, %d shared models", len(trained), len(shared))
    return OK


# isolated decoding; worker state lives in module globals so it is shipped once per process
_W: dict = {}


def _init_isolated(bundle_dict, tau, start_frames, nbest, gate):
    b = ModelBundle.from_dict(bundle_dict)
    _W.update(tms=b.model_set(), cb=b.gate_codebook() if gate else None,
              cfg=GateConfig(tau, start_frames) if gate else None, nbest=nbest)


def _isolated_one(frames):
    counter = OpCounter()
    tms, cb, cfg = _W["tms"], _W["cb"], _W["cfg"]
    n_cand = len(tms)
    if cb is not None:
        n_cand = len(active_candidates(frames, cb, tms.codebook, cfg,
                                       score_tables(tms.codebook, frames[: cfg.start_frames])).ids)
    hyps = recognize_isolated(frames, tms, cb, cfg, _W["nbest"], counter)
    return hyps, n_cand, counter.viterbi_evals


def _run_isolated(bundle, data, args):
    init = (bundle.to_dict(), args.tau, args.start_frames, args.nbest, not args.no_gate)
    return _pmap(_isolated_one, [s.frames for s in data], args.jobs, _init_isolated, init)


def _init_continuous(bundle_dict, ns):
    _W.update(net=_network(ModelBundle.from_dict(bundle_dict), ns), beams=_beams(ns))


def _continuous_one(frames):
    try:
        return decode(frames, _W["net"], _W["beams"])
    except DecodeError as exc:
        log.warning("decode failed: %s", exc)
        return None


def _run_continuous(bundle, data, args):
    _network(bundle, args)  # surface configuration errors before forking
    ns = argparse.Namespace(**{k: getattr(args, k) for k in
                               ("lm_scale", "insertion_penalty", "transitions", "state_beam",
                                "sign_beam", "unit_threshold", "lookahead_beam")})
    return _pmap(_continuous_one, [s.frames for s in data], args.jobs, _init_continuous, (bundle.to_dict(), ns))


def _label(s):
    return None if s.label is None else (s.label if isinstance(s.label, str) else list(s.label))


def cmd_decode_isolated(args) -> int:
    bundle = ModelBundle.load(args.model)
    data = _load_dataset(args.dataset, bundle)
    out, failed = [], 0
    for i, (s, (hyps, n_cand, _)) in enumerate(zip(data, _run_isolated(bundle, data, args))):
        failed += not hyps
        out.append({"index": i, "label": _label(s), "candidates": n_cand,
                    "hypotheses": [{"sign": w, "score": sc} for w, sc in hyps]})
    _write_lines(args.out, out)
    return RECOGNITION_FAILURE if failed else OK


def cmd_decode_continuous(args) -> int:
    bundle = ModelBundle.load(args.model)
    data = _load_dataset(args.dataset, bundle)
    out, failed = [], 0
    for i, (s, r) in enumerate(zip(data, _run_continuous(bundle, data, args))):
        failed += r is None
        out.append({"index": i, "label": _label(s),
                    "signs": None if r is None else list(r.signs),
                    "segments": None if r is None else [list(x) for x in r.segments],
                    "score": None if r is None else r.score})
    _write_lines(args.out, out)
    return RECOGNITION_FAILURE if failed else OK


def _table(rows: list[tuple[str, ...]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_eval(args) -> int:
    bundle = ModelBundle.load(args.model)
    data = _load_dataset(args.dataset, bundle)
    if any(s.label is None for s in data):
        raise DataError(f"{args.dataset}: evaluation needs labeled sequences")
    t0 = time.perf_counter()
    if args.mode == "isolated":
        results = _run_isolated(bundle, data, args)
        elapsed = time.perf_counter() - t0
        utts, correct, failed = [], 0, 0
        for i, (s, (hyps, n_cand, evals)) in enumerate(zip(data, results)):
            ref = " ".join(s.signs)
            hyp = hyps[0][0] if hyps else None
            failed += hyp is None
            correct += hyp == ref
            utts.append({"index": i, "label": ref, "hypothesis": hyp, "correct": hyp == ref,
                         "candidates": n_cand, "viterbi_evals": evals})
        n = len(utts)
        report = {"mode": "isolated", "n": n, "correct": correct, "accuracy": correct / n,
                  "viterbi_evals": sum(u["viterbi_evals"] for u in utts),
                  "mean_candidates": sum(u["candidates"] for u in utts) / n,
                  "failures": failed, "seconds": elapsed, "utterances": utts}
        text = _table([("N", "correct", "accuracy", "mean candidates", "viterbi evals"),
                       (str(n), str(correct), f"{100 * correct / n:.2f}%",
                        f"{report['mean_candidates']:.1f}", str(report["viterbi_evals"]))])
    else:
        results = _run_continuous(bundle, data, args)
        elapsed = time.perf_counter() - t0
        utts, total, failed = [], ErrorCounts(), 0
        stats = PruneStats()
        for i, (s, r) in enumerate(zip(data, results)):
            hyp = () if r is None else r.signs
            failed += r is None
            c = align(s.signs, hyp)
            total = total + c
            if r is not None:
                for k, v in r.stats.to_dict().items():
                    setattr(stats, k, max(getattr(stats, k), v) if k == "peak_active" else getattr(stats, k) + v)
            utts.append({"index": i, "reference": list(s.signs), "hypothesis": list(hyp), **c.to_dict()})
        wcr = word_correct_rate(total)
        report = {"mode": "continuous", **total.to_dict(), "word_correct_rate": wcr,
                  "sentences": len(utts), "failures": failed, "seconds": elapsed,
                  "pruning": stats.to_dict(), "utterances": utts}
        text = _table([("D", "I", "S", "N", "word correct rate"),
                       (str(total.D), str(total.I), str(total.S), str(total.N), f"{100 * wcr:.2f}%")])
    if args.out:
        _write_json(args.out, report)
    if args.json:
        _write_json(None, report)
    else:
        print(text)
    return RECOGNITION_FAILURE if failed else OK


# -- parser ----------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _add_decode_flags(p, continuous: bool, isolated: bool):
    if isolated:
        p.add_argument("--tau", type=float, default=1e-3, help="codeword posterior threshold")
        p.add_argument("--start-frames", type=_positive_int, default=3)
        p.add_argument("--nbest", type=_positive_int, default=1)
        p.add_argument("--no-gate", action="store_true", help="score every sign")
    if continuous:
        inf = float("inf")
        p.add_argument("--state-beam", type=float, default=inf)
        p.add_argument("--sign-beam", type=float, default=inf)
        p.add_argument("--unit-threshold", type=float, default=inf)
        p.add_argument("--lookahead-beam", type=float, default=inf)
        p.add_argument("--lm-scale", type=float, default=1.0)
        p.add_argument("--insertion-penalty", type=float, default=0.0)
        p.add_argument("--transitions", choices=("model", "interpolate", "none"), default=None,
                       help="transition models to use (default: stored ones if any, else interpolated)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=_positive_int, default=1)
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="signtie", description="Multi-stream HMM sign recognition.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="sample a synthetic dataset")
    p.add_argument("--signs", type=_positive_int, default=20)
    p.add_argument("--states", type=_positive_int, default=3)
    p.add_argument("--mixtures", type=_positive_int, default=1)
    p.add_argument("--separation", type=float, default=SynthConfig.separation)
    p.add_argument("--reps", type=_positive_int, default=5, help="isolated samples per sign")
    p.add_argument("--sentences", type=int, default=0, help="sample this many sentences instead")
    p.add_argument("--length", type=_int_pair, default=(2, 8), help="sentence length range, e.g. 2,8")
    p.add_argument("--no-epenthesis", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="also write the generating models as a bundle")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one HMM per sign")
    p.add_argument("dataset")
    p.add_argument("--states", choices=("3", "5", "auto"), default="3")
    p.add_argument("--mixtures", type=_positive_int, default=1)
    p.add_argument("--normalize", action="store_true", help="fit min/max scaling on the data")
    p.add_argument("--lm-from", help="copy the language model from another bundle")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("tie", parents=[common], help="cluster stream states into shared patterns")
    p.add_argument("--model", required=True)
    p.add_argument("--patterns", type=_patterns, default=(256,) * 6,
                   help="Lp,Lo,Ls,Rp,Ro,Rs pattern counts, one count for all, or 'max'")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_tie)

    p = sub.add_parser("train-transitions", parents=[common], help="train movement-epenthesis models")
    p.add_argument("dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--states", type=int, choices=(1, 3), default=1)
    p.add_argument("--tie", type=int, default=0, help="cluster into this many shared models (0: no tying)")
    p.add_argument("--prior-weight", type=float, default=10.0,
                   help="pseudo-frames of the interpolated model used as a prior")
    p.add_argument("--min-occupancy", type=float, default=0.0)
    p.add_argument("--iterations", type=_positive_int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_transitions)

    p = sub.add_parser("decode-isolated", parents=[common], help="recognize isolated signs")
    p.add_argument("dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="JSON-lines output (default stdout)")
    _add_decode_flags(p, continuous=False, isolated=True)
    p.set_defaults(fn=cmd_decode_isolated)

    p = sub.add_parser("decode-continuous", parents=[common], help="decode sign sentences")
    p.add_argument("dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="JSON-lines output (default stdout)")
    _add_decode_flags(p, continuous=True, isolated=False)
    p.set_defaults(fn=cmd_decode_continuous)

    p = sub.add_parser("eval", parents=[common], help="score a model on labeled data")
    p.add_argument("dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("isolated", "continuous"), default="isolated")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--json", action="store_true", help="print the JSON report instead of the table")
    _add_decode_flags(p, continuous=True, isolated=True)
    p.set_defaults(fn=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    warnings.simplefilter("default")
    try:
        return args.fn(args)
    except (DataError, BundleError, TrainingError, UsageError, FileNotFoundError) as exc:
        print(f"signtie {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, KeyError) as exc:
        print(f"signtie {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
