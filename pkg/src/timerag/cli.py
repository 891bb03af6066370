"""Operator command line: gen-synth, preprocess, label, train, ingest,
diagnose, eval. All randomness flows from explicit seeds; --mock-llm swaps
network clients for scripted ones so every command can run hermetically."""

from __future__ import annotations

import argparse
import json
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib
from pathlib import Path

import numpy as np

from . import abstraction, agent, evalharness, llmclient, metrics, ragstore, training, vocab
from .encoder import AlignmentModel, EncoderConfig
from .errors import TimeragError

DEFAULT_CONFIG = {
    "seed": 0,
    "dims": {
        "d_model": 32,
        "d_llm": 32,
        "n_heads": 4,
        "n_classes": 5,
        "n_prototypes": 16,
        "vocab_size": 64,
    },
    "data": {
        "patch_len": 30,
        "target_len": 900,
        "n_features": 3,
    },
    "training": {
        "epochs": 50,
        "batch_size": 8,
        "lr_max": 3e-3,
        "lr_min": 1e-5,
        "mask_top_fraction": 0.01,
        "mask_probability": 0.3,
    },
    "store": {
        "d_e": 32,
        "k": 5,
        "max_iterations": 5,
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config(path: str | None) -> dict:
    """Defaults merged with the TOML file; unknown keys are rejected."""
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULT_CONFIG.items()}
    if path is None:
        return cfg
    with open(path, "rb") as fh:
        user = tomllib.load(fh)
    for section, value in user.items():
        if section not in cfg:
            raise UsageError(f"unknown config key {section!r}")
        if isinstance(cfg[section], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {section!r} must be a table")
            for k, v in value.items():
                if k not in cfg[section]:
                    raise UsageError(f"unknown config key {section}.{k}")
                cfg[section][k] = v
        else:
            cfg[section] = value
    return cfg


def _load_mock_llm(path: str) -> llmclient.MockChatClient:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, list):
        return llmclient.MockChatClient(data)
    mode = data.get("mode", "ordered")
    if mode == "ordered":
        return llmclient.MockChatClient(list(data["responses"]))
    if mode == "keyed":
        return llmclient.MockChatClient(dict(data["responses"]))
    raise UsageError(f"unknown mock script mode {mode!r}")


def _chat_client(args) -> llmclient.ChatClient:
    if getattr(args, "mock_llm", None):
        return _load_mock_llm(args.mock_llm)
    return llmclient.HttpChatClient()


def cmd_gen_synth(args) -> int:
    scenarios = evalharness.generate_synthetic(args.n, seed=args.seed)
    metrics.save_samples([s.sample for s in scenarios], args.out)
    if args.shapes_out:
        with open(args.shapes_out, "w", encoding="utf-8") as fh:
            for s in scenarios:
                fh.write(
                    json.dumps(
                        {
                            "id": s.sample.id,
                            "shape_sequence": s.shape_sequence,
                            "failure_class": s.failure_class,
                        }
                    )
                    + "\n"
                )
    print(f"wrote {len(scenarios)} scenarios to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    samples = metrics.load_samples(args.input, format=args.format)
    out = []
    for s in samples:
        for std in metrics.standardize_length(s, args.target_len):
            out.append(metrics.normalize_minmax(std))
    metrics.save_samples(out, args.out)
    print(f"standardized {len(samples)} samples into {len(out)} windows of {args.target_len}")
    return 0


def cmd_label(args) -> int:
    samples = metrics.load_samples(args.input)
    vocabulary = abstraction.LabelVocabulary()
    if args.mock_llm:
        client = _load_mock_llm(args.mock_llm)

        def abstractor(patch):
            return abstraction.abstract_patch_llm(patch, vocabulary, client)

    else:
        def abstractor(patch):
            return abstraction.abstract_patch_rule(patch, vocabulary)

    labeled = abstraction.label_dataset(samples, abstractor, args.patch_len)
    abstraction.save_labels([lab for _, lab in labeled], args.out)
    print(f"labeled {len(labeled)} patches from {len(samples)} samples")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    dims, data_cfg, tr = cfg["dims"], cfg["data"], cfg["training"]

    if args.table:
        table = vocab.load_embedding_table(args.table)
    else:
        table = vocab.build_synthetic_table(dims["vocab_size"], dims["d_llm"], seed=cfg["seed"])

    samples = metrics.load_samples(args.data)
    raw_labels = abstraction.load_labels(args.labels)
    # labels are persisted with ids in the label vocabulary; remap onto the table
    label_vocab = abstraction.LabelVocabulary.from_table(table)
    for lab in raw_labels:
        lab.token_id = label_vocab.id_of(lab.token)

    encoder_cfg = EncoderConfig(
        patch_len=data_cfg["patch_len"],
        n_features=data_cfg["n_features"],
        d_model=dims["d_model"],
        d_llm=dims["d_llm"],
        n_heads=dims["n_heads"],
        n_classes=dims["n_classes"],
        n_prototypes=dims["n_prototypes"],
    )
    train_cfg = training.TrainConfig(
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        lr_max=tr["lr_max"],
        lr_min=tr["lr_min"],
        mask_top_fraction=tr["mask_top_fraction"],
        mask_probability=tr["mask_probability"],
        seed=cfg["seed"],
    )
    examples = training.assemble_examples(samples, raw_labels, data_cfg["patch_len"])
    model = AlignmentModel(encoder_cfg, table, seed=cfg["seed"])
    model, epoch_metrics = training.train(examples, model, train_cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save_embedding_table(table, out / "table.txt")
    model.save(out / "model.ckpt")
    training.save_metrics(epoch_metrics, out / "metrics.jsonl")
    final = epoch_metrics[-1] if epoch_metrics else {}
    print(
        f"trained {train_cfg.epochs} epochs on {len(examples)} samples; "
        f"final loss {final.get('loss', float('nan')):.4f}, "
        f"token acc {final.get('token_acc', float('nan')):.3f}, "
        f"class acc {final.get('class_acc', float('nan')):.3f}"
    )
    return 0


def cmd_ingest(args) -> int:
    docs = ragstore.load_documents(args.docs)
    embedder = llmclient.HashingEmbedder(args.d_e)
    if args.keep_all:
        classifier = lambda text: True  # noqa: E731
    else:
        client = _chat_client(args)
        classifier = lambda text: llmclient.classify_binary(  # noqa: E731
            client,
            text,
            "Does this text describe incident symptoms or their resolutions?",
        )
    store = ragstore.VectorStore(args.d_e)
    report = ragstore.ingest(docs, embedder, classifier, store)
    ragstore.save_store(store, args.store)
    print(
        f"ingested {report.documents} docs: {report.chunks} chunks, "
        f"{report.kept} kept, {report.embedded} embedded -> {args.store}"
    )
    return 0


def cmd_diagnose(args) -> int:
    store = ragstore.load_store(args.store)
    table = vocab.load_embedding_table(Path(args.ckpt) / "table.txt")
    model = AlignmentModel.load(Path(args.ckpt) / "model.ckpt", table)
    llm = _chat_client(args)
    embedder = llmclient.HashingEmbedder(store.d_e)

    samples = metrics.load_samples(args.sample)
    prepared = []
    for s in samples:
        for std in metrics.standardize_length(s, args.target_len):
            prepared.append(metrics.normalize_minmax(std))
    patches = np.stack(
        [
            np.stack([p.values for p in metrics.segment_into_patches(s, model.cfg.patch_len)])
            for s in prepared
        ]
    )
    aligned = model.forward(patches)
    query = agent.compose_query(aligned, prepared, table, embedder)
    report, trace = agent.reflect_loop(
        query, store, llm, embedder, max_iterations=args.max_iterations, k=args.k
    )
    payload = {"report": report.to_dict(), "trace": agent.trace_to_dict(trace)}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_eval(args) -> int:
    scenarios = evalharness.generate_synthetic(args.n, seed=args.seed)
    items = [evalharness.build_mcq(s, args.n_choices, seed=args.seed) for s in scenarios]
    if args.mode == "oracle":
        pipeline = lambda item, prompt: f"Answer: {chr(ord('A') + item.gold_index)}"  # noqa: E731
    elif args.mode == "random":
        rng = np.random.default_rng(args.seed)
        pipeline = lambda item, prompt: (  # noqa: E731
            f"Answer: {chr(ord('A') + int(rng.integers(len(item.choices))))}"
        )
    else:
        client = _chat_client(args)

        def pipeline(item, prompt):
            return client.chat(
                llmclient.ChatRequest(messages=[{"role": "user", "content": prompt}])
            ).content

    accuracy, records = evalharness.evaluate_accuracy(items, pipeline, seed=args.seed)
    if args.out:
        evalharness.save_results(accuracy, records, args.seed, args.out)
    print(f"accuracy {accuracy:.4f} over {len(items)} items")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="timerag")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate synthetic failure scenarios")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--shapes-out")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("preprocess", help="standardize and normalize samples")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["jsonl", "csv-dir"], default="jsonl")
    p.add_argument("--target-len", type=int, default=900)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("label", help="attach single-token labels to patches")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-len", type=int, default=30)
    p.add_argument("--mock-llm")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train the alignment encoder")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--table")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ingest", help="build the incident vector store")
    p.add_argument("--docs", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--d-e", type=int, default=32)
    p.add_argument("--mock-llm")
    p.add_argument("--keep-all", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("diagnose", help="run retrieval-augmented diagnosis")
    p.add_argument("--sample", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mock-llm")
    p.add_argument("--out")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-iterations", type=int, default=5)
    p.add_argument("--target-len", type=int, default=900)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("eval", help="multiple-choice accuracy harness")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--n-choices", type=int, default=5)
    p.add_argument("--mode", choices=["oracle", "random", "llm"], default="oracle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--mock-llm")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (TimeragError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
