"""Command-line entry points: gen-synthetic, build-dict, pretrain, refine, finetune, eval.

Exit codes: 0 success, 1 usage error (bad flags, invalid config, missing
prerequisite artifact), 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .corpus import CorpusError, SyntheticSpec, gen_synthetic, load_corpus, save_corpus
from .dictionary import (SOURCES, DictionaryError, FixtureClient, HTTPClient, LLMClientError,
                         augment_with_llm, build_manual_dictionary, load_dictionary,
                         save_dictionary)
from .encoders import ModelState, ModelStateError
from .evaluation import evaluate_grounding, evaluate_zero_shot, load_annotations
from .trainer import (ConfigError, TrainConfig, read_refined, refine_corpus, train_iteration1,
                      train_iteration2)

log = logging.getLogger("refinevl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad flags, invalid configuration or a missing prerequisite artifact."""


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[Path] = field(default_factory=list)
    message: str = ""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"missing {what}: {p}")
    return p


def _read_json(path: Path, what: str) -> dict:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{what} {path} must contain a JSON object")
    return data


def _train_config(path: str, iteration: int, seed: int | None) -> TrainConfig:
    data = _read_json(_require(path, "config file"), "config file")
    data.setdefault("iteration", iteration)
    if seed is not None:
        data["seed"] = seed
    try:
        cfg = TrainConfig.from_dict(data)
    except (ConfigError, TypeError, ValueError) as e:
        raise UsageError(f"invalid config {path}: {e}") from None
    if cfg.iteration != iteration:
        raise UsageError(f"config {path} has iteration {cfg.iteration}, expected {iteration}")
    return cfg


def _corpus(path: str):
    root = _require(path, "corpus directory")
    _require(root / "samples.jsonl", "corpus index")
    return load_corpus(root)


def _checkpoint(path: str) -> ModelState:
    try:
        state = ModelState.load(_require(path, "checkpoint"))
        state.check_ready()
    except ModelStateError as e:
        raise UsageError(f"unusable checkpoint {path}: {e}") from None
    return state


def _dictionary(path: str):
    try:
        return load_dictionary(_require(path, "dictionary"))
    except DictionaryError as e:
        raise UsageError(f"invalid dictionary {path}: {e}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args) -> CommandResult:
    data = _read_json(_require(args.spec, "spec file"), "spec file")
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(data)
        spec.validate()
    except (CorpusError, TypeError, ValueError) as e:
        raise UsageError(f"invalid spec {args.spec}: {e}") from None
    written = save_corpus(gen_synthetic(spec), args.out)
    spec_out = Path(args.out) / "spec.json"
    spec_out.write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return CommandResult(EXIT_OK, written + [spec_out])


def cmd_build_dict(args) -> CommandResult:
    d = build_manual_dictionary()
    if args.mode == "llm":
        if args.fixtures:
            client = FixtureClient(_require(args.fixtures, "fixture directory"))
        elif args.endpoint:
            if not args.model:
                raise UsageError("--endpoint needs --model")
            client = HTTPClient(args.endpoint, args.model, args.api_key_env)
        else:
            raise UsageError("--mode llm needs --fixtures <dir> or --endpoint <url>")
        d = augment_with_llm(d, client, args.n_per_disease, args.source)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dictionary(d, out)
    return CommandResult(EXIT_OK, [out])


def cmd_pretrain(args) -> CommandResult:
    cfg = _train_config(args.config, 1, args.seed)
    corpus = _corpus(args.corpus)
    d = _dictionary(args.dict) if args.dict else None
    out = Path(args.out)
    train_iteration1(corpus, cfg, out_dir=out, dictionary=d)
    return CommandResult(EXIT_OK, [out / "model.zip", out / "run.jsonl"])


def cmd_refine(args) -> CommandResult:
    cfg = _train_config(args.config, 2, args.seed)
    if args.ratio is not None:
        cfg = replace(cfg, refinement_ratio=args.ratio)
        try:
            cfg.validate()
        except ConfigError as e:
            raise UsageError(str(e)) from None
    state = _checkpoint(args.checkpoint)
    d = _dictionary(args.dict)
    corpus = _corpus(args.corpus)
    out = Path(args.out)
    refine_corpus(corpus, state, d, cfg, out_dir=out)
    return CommandResult(EXIT_OK, [out / "refined.jsonl"])


def cmd_finetune(args) -> CommandResult:
    cfg = _train_config(args.config, 2, args.seed)
    state = _checkpoint(args.checkpoint)
    corpus = _corpus(args.corpus)
    try:
        refined = read_refined(_require(args.refined, "refined corpus"))
    except (json.JSONDecodeError, KeyError) as e:
        raise UsageError(f"invalid refined corpus {args.refined}: {e}") from None
    out = Path(args.out)
    try:
        train_iteration2(state, corpus, refined, cfg, out_dir=out)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    return CommandResult(EXIT_OK, [out / "model.zip", out / "run.jsonl"])


def cmd_eval(args) -> CommandResult:
    do_zs = args.zeroshot or not args.grounding
    do_gr = args.grounding or not args.zeroshot
    if args.config:
        _read_json(_require(args.config, "config file"), "config file")
    state = _checkpoint(args.checkpoint)
    corpus = _corpus(args.corpus)
    result = {"checkpoint_fingerprint": state.cfg.fingerprint(),
              "checkpoint_meta": {k: state.meta[k] for k in sorted(state.meta)},
              "n_samples": len(corpus)}
    if do_zs:
        if not args.dict:
            raise UsageError("missing dictionary: zero-shot evaluation needs --dict")
        d = _dictionary(args.dict)
        diseases = args.diseases or sorted(corpus[0].labels or {})
        if not diseases:
            raise UsageError("corpus has no labels; pass --diseases")
        unknown = [x for x in diseases if x not in d]
        if unknown:
            raise UsageError(f"diseases not in dictionary: {unknown}")
        zs = evaluate_zero_shot(corpus, diseases, d, state)
        result.update(zs)
    if do_gr:
        ann_path = _require(args.annotations or Path(args.corpus) / "grounding.jsonl",
                            "grounding annotations")
        heat_dir = Path(args.out) / "heatmaps" if args.heatmaps else None
        result.update(evaluate_grounding(corpus, load_annotations(ann_path), state,
                                         args.threshold_quantile, heat_dir))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    artifacts = [path]
    if args.heatmaps and do_gr:
        artifacts.extend(sorted((out / "heatmaps").glob("*.pgm")))
    return CommandResult(EXIT_OK, artifacts)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="refinevl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="write a synthetic glyph corpus")
    g.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    g.add_argument("--out", required=True, help="corpus output directory")
    g.add_argument("--seed", type=int, help="overrides the spec seed")
    g.set_defaults(func=cmd_gen_synthetic)

    b = sub.add_parser("build-dict", help="build the clinical dictionary")
    b.add_argument("--mode", choices=("manual", "llm"), required=True)
    b.add_argument("--fixtures", help="recorded LLM responses directory (offline mode)")
    b.add_argument("--endpoint", help="chat-completions URL (live mode)")
    b.add_argument("--model", help="model name for the live endpoint")
    b.add_argument("--api-key-env", default="LLM_API_KEY",
                   help="environment variable holding the API key")
    b.add_argument("--source", choices=SOURCES, default="custom",
                   help="provenance tag recorded in the dictionary (llm mode)")
    b.add_argument("--n-per-disease", type=int, default=5)
    b.add_argument("--out", required=True, help="dictionary JSON output path")
    b.add_argument("--seed", type=int, help="accepted for uniformity; unused")
    b.set_defaults(func=cmd_build_dict)

    t = sub.add_parser("pretrain", help="iteration-1 training on raw reports")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--dict", help="dictionary whose sentences join the vocabulary")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("refine", help="refine reports with the iteration-1 model")
    r.add_argument("--config", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dict", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--ratio", type=float, help="overrides refinement_ratio")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_refine)

    f = sub.add_parser("finetune", help="iteration-2 training on refined reports")
    f.add_argument("--config", required=True)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--corpus", required=True)
    f.add_argument("--refined", required=True, help="refined.jsonl from the refine step")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="zero-shot AUC and grounding metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--dict")
    e.add_argument("--config", help="optional stage config, checked for validity only")
    e.add_argument("--zeroshot", action="store_true", help="run zero-shot classification")
    e.add_argument("--grounding", action="store_true", help="run phrase grounding")
    e.add_argument("--annotations", help="grounding.jsonl (default: <corpus>/grounding.jsonl)")
    e.add_argument("--diseases", nargs="+", help="diseases to score (default: corpus labels)")
    e.add_argument("--heatmaps", action="store_true", help="dump PGM saliency maps")
    e.add_argument("--threshold-quantile", type=float, default=0.9)
    e.add_argument("--seed", type=int, help="accepted for uniformity; evaluation is deterministic")
    e.set_defaults(func=cmd_eval)
    return p


def run(argv: list[str] | None = None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as e:
        return CommandResult(EXIT_USAGE, message=str(e))
    except SystemExit as e:  # --help
        return CommandResult(EXIT_OK if not e.code else EXIT_USAGE)
    except (LLMClientError, DictionaryError, ModelStateError, ConfigError, CorpusError) as e:
        return CommandResult(EXIT_RUNTIME, message=f"error: {e}")
    except Exception as e:  # anything unexpected is a runtime failure, not a usage one
        log.debug("unhandled error", exc_info=True)
        return CommandResult(EXIT_RUNTIME, message=f"error: {type(e).__name__}: {e}")


def main(argv: list[str] | None = None) -> int:
    result = run(argv)
    if result.message:
        print(result.message, file=sys.stderr)
    for a in result.artifacts:
        print(a)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
