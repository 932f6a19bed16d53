"""Command line entry point: ``bloodseg {synth,preprocess,train,eval,count}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path


from . import cell_counter, dced_net, label_codec as lc, seg_metrics, smear_synth, trainer

log = logging.getLogger("bloodseg")


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def _load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def cmd_synth(args) -> int:
    cfg = smear_synth.SynthConfig.from_dict(_load_json(args.config)) if args.config else smear_synth.SynthConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    manifest = smear_synth.generate_corpus(cfg, args.count, args.out, preview=args.preview)
    print(manifest)
    return 0


def cmd_preprocess(args) -> int:
    triples = lc.collect_mask_triples(args.images, args.masks_rbc, args.masks_wbc, args.masks_plt)
    if not triples:
        log.warning("no stems common to all input directories; writing an empty manifest")
    entries = [lc.preprocess_triple(img, r, w, p, args.size, sid) for sid, img, r, w, p in triples]
    manifest = lc.write_datastore(entries, args.out, preview=args.preview)
    print(manifest)
    return 0


def _network_config(spec: str, entries, seed: int) -> dced_net.NetworkConfig:
    if spec in dced_net.PRESETS:
        size = (entries[0].image.shape[1], entries[0].image.shape[0]) if entries else (300, 300)
        return dced_net.NetworkConfig.preset(spec, input_size=size, seed=seed)
    cfg = dced_net.NetworkConfig.from_json(spec)
    cfg.seed = seed
    return cfg


def cmd_train(args) -> int:
    tcfg = trainer.TrainConfig.from_json(args.config) if args.config else trainer.TrainConfig()
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    print(json.dumps({"train": asdict(tcfg)}, sort_keys=True))
    entries = lc.read_datastore(args.data)
    train_set, test_set = trainer.split_dataset(entries, tcfg)
    ncfg = _network_config(args.network, entries, tcfg.seed)
    print(json.dumps({"network": ncfg.to_dict()}, sort_keys=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = dced_net.build(ncfg)
    model, rows = trainer.train(model, train_set, tcfg, checkpoint_dir=out)
    model.save(out / "model.safetensors")
    trainer.write_log(rows, out / "train_log.csv")
    split = {"train": [e.source_id for e in train_set], "test": [e.source_id for e in test_set]}
    (out / "split.json").write_text(json.dumps(split, indent=1), encoding="utf-8")
    last = rows[-1]
    print(f"epochs={tcfg.epochs} iterations={last.iteration} loss={last.loss:.5f} "
          f"pixel_accuracy={last.pixel_accuracy:.5f}")
    return 0


def _select(entries, split_path):
    if not split_path:
        return entries
    wanted = set(_load_json(split_path)["test"])
    return [e for e in entries if e.source_id in wanted]


def cmd_eval(args) -> int:
    model = dced_net.DcedModel.load(args.checkpoint)
    entries = _select(lc.read_datastore(args.data), args.split)
    evaluated = lc.CLASS_IDS if args.include_background else seg_metrics.CELL_CLASSES
    report = trainer.evaluate_on(model, entries, evaluated=evaluated, tolerance=args.tolerance)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    text = report.to_text()
    out.with_suffix(".txt").write_text(text, encoding="utf-8")
    print(text, end="")
    table = report.aggregate.as_table()
    undefined = [k for k in args.metrics if table[k] is None]
    if undefined:
        log.error("undefined metrics: %s", ", ".join(undefined))
        return 1
    return 0


def cmd_count(args) -> int:
    if args.labels:
        root = Path(args.labels)
        if (root / "manifest.tsv").exists():
            labels = [e.label for e in lc.read_datastore(root)]
        else:
            labels = [lc.read_image(p) for p in sorted(root.glob("*.png"))]
        scope = "truth"
    else:
        model = dced_net.DcedModel.load(args.checkpoint)
        labels = [dced_net.predict(model, dced_net.image_to_input(e.image))[0]
                  for e in lc.read_datastore(args.data)]
        scope = "prediction"
    if not labels:
        raise ValueError("no label masks found")
    report = cell_counter.count_corpus(labels, include_background=args.include_background)
    report.scope = f"{scope} corpus ({report.images} images)"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "counts.json").write_text(report.to_json(), encoding="utf-8")
    (out / "counts.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_csv(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bloodseg", description="Whole-slide blood cell semantic segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic smear datastore")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=108)
    s.add_argument("--seed", type=int)
    s.add_argument("--preview", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="fuse per-class masks, resize and write a datastore")
    s.add_argument("--images", required=True)
    s.add_argument("--masks-rbc", required=True)
    s.add_argument("--masks-wbc", required=True)
    s.add_argument("--masks-plt", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--size", type=_size, default=(300, 300), help="WxH, default 300x300")
    g.add_argument("--keep-size", dest="size", action="store_const", const=None)
    s.add_argument("--preview", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a network on a datastore")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="training config JSON")
    s.add_argument("--network", default="vgg16", help="preset name (vgg16, tiny) or network config JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a datastore")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--report", required=True, help="JSON report path; a .txt table is written alongside")
    s.add_argument("--split", help="split.json from train; evaluates its test ids only")
    s.add_argument("--tolerance", type=float, help="BF match distance in pixels")
    s.add_argument("--include-background", action="store_true")
    s.add_argument("--metrics", nargs="+", choices=seg_metrics.AGGREGATE_KEYS, default=list(seg_metrics.AGGREGATE_KEYS))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("count", help="classwise pixel counts")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--labels", help="datastore root or directory of label PNGs")
    g.add_argument("--checkpoint", help="count predictions of this model on --data")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--include-background", action="store_true")
    s.set_defaults(func=cmd_count)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "count" and args.checkpoint and not args.data:
        parser.error("count: --checkpoint requires --data")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
