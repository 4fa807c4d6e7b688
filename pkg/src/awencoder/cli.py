"""Command-line driver: pretrain, watermark, verify, attack, report.

Exit status: 0 success / verified, 1 not verified, 2 usage or config error,
3 numerical failure during a run.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from . import attacks as atk
from . import data as dat
from . import watermark as wmk
from .config import ExperimentConfig, load_config
from .contrastive import ContrastiveModel, TrainingDiverged, history_csv, pretrain
from .models import MLP, CheckpointError, load_checkpoint, predict_labels, save_checkpoint, train_linear_probe
from .numcore import GraphError, NumericError
from .verification import (CalibrationError, VerificationReport, calibrate_threshold, t_cls, t_sim,
                           verify, watermark_id)

log = logging.getLogger("awencoder")

EXIT_OK, EXIT_NOT_VERIFIED, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

RUN_ARTIFACTS = ("config.resolved.json", "pretrain.awck", "pretrain_history.csv", "watermark.awwm",
                 "marked.awck", "embed_history.csv", "calibration.json")


class UsageError(Exception):
    pass


# -- shared plumbing ---------------------------------------------------------------------

class Splits:
    """The dataset regenerated from config, cut into the roles every phase uses."""

    def __init__(self, cfg: ExperimentConfig):
        self.ds = dat.generate(cfg.synthetic())
        self.digest = hashlib.sha256(dat.to_bytes(self.ds)).hexdigest()
        self.pretrain = self.ds.images[self.ds.indices("pretrain")]
        self.pretrain_flat = self.pretrain.reshape(len(self.pretrain), -1)
        v, _ = self.ds.split("verify")
        self.verify = v[:cfg.verify.n_verify]
        self.train_x, self.train_y = self.ds.split("downstream_train")
        tx, ty = self.ds.split("downstream_test")
        self.test_x, self.test_y = tx[:cfg.verify.n_downstream], ty[:cfg.verify.n_downstream]

    def eval_data(self) -> atk.EvalData:
        return atk.EvalData(self.pretrain, self.verify, self.train_x, self.train_y,
                            self.test_x, self.test_y, self.ds.num_classes)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = out / "config.resolved.json"
    text = cfg.canonical_json()
    if not snapshot.exists() or snapshot.read_text() != text:
        snapshot.write_text(text)
    return out


def _meta(cfg: ExperimentConfig, splits: Splits, phase: str, **extra) -> dict:
    return {"phase": phase, "seed": cfg.seed, "config_hash": cfg.content_hash(),
            "dataset_hash": splits.digest, **extra}


def _load_models(path) -> tuple[dict[str, MLP], dict]:
    if path is None or not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _check_shape(encoder: MLP, splits: Splits) -> None:
    if encoder.input_dim != splits.ds.input_dim:
        raise UsageError(f"checkpoint encoder expects {encoder.input_dim} inputs but the configured "
                         f"images have {splits.ds.input_dim} ({splits.ds.image_shape})")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- pretrain ------------------------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    splits = Splits(cfg)
    ccfg = cfg.contrastive_config()
    model = pretrain(splits.pretrain, ccfg, cfg.seed_for("pretrain"),
                     log=lambda r: log.info("pretrain epoch %d loss %.6f", r["epoch"], r["loss"]))
    probe = train_linear_probe(model.encoder, splits.train_x, splits.train_y, cfg.probe_config(splits.ds.num_classes))
    meta = _meta(cfg, splits, "pretrain", algorithm=ccfg.algorithm)
    digest = save_checkpoint(out / "pretrain.awck", {"encoder": model.encoder, "head": model.head}, meta)
    save_checkpoint(out / "clean_downstream.awck", {"encoder": model.encoder, "probe": probe}, meta)
    (out / "pretrain_history.csv").write_text(history_csv(model.history))
    h = model.history
    print(f"pretrain: {ccfg.algorithm} {len(h)} epochs, loss {h[0]['loss']:.4f} -> {h[-1]['loss']:.4f}; "
          f"checkpoint {out / 'pretrain.awck'} sha256 {digest[:16]}" if h else
          f"pretrain: 0 epochs; checkpoint {out / 'pretrain.awck'} sha256 {digest[:16]}")
    return EXIT_OK


# -- watermark -------------------------------------------------------------------------

def cmd_watermark(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    splits = Splits(cfg)
    models, _ = _load_models(args.checkpoint or out / "pretrain.awck")
    if "encoder" not in models or "head" not in models:
        raise UsageError("watermarking needs a pretraining checkpoint with encoder and head")
    encoder = models["encoder"]
    _check_shape(encoder, splits)
    key = dat.key_image(splits.ds, cfg.watermark.key_class, cfg.watermark.key_index)
    if cfg.epsilon == 0:
        log.warning("epsilon is 0: the watermark is the zero perturbation and verifies nothing")
        print("warning: epsilon=0 produces a zero watermark", file=sys.stderr)
    wm = wmk.generate_watermark(encoder, splits.pretrain_flat, key, cfg.epsilon, cfg.pgd(),
                                cfg.seed_for("pgd"), splits.ds.image_shape)
    wmk.save(wm, out / "watermark.awwm")
    _write_csv(out / "pgd_trajectory.csv", ["step", "adv_loss"],
               [(i, f"{v:.12g}") for i, v in enumerate(wm.loss_trajectory)])

    ccfg = cfg.contrastive_config()
    clean = ContrastiveModel(encoder, models["head"])
    marked = wmk.embed_watermark(clean, splits.pretrain, wm, cfg.embed_config(), ccfg, cfg.seed_for("embed"),
                                 log=lambda r: log.info("embed epoch %d loss %.6f wat %.3g",
                                                        r["epoch"], r["loss"], r["wat"]))
    meta = _meta(cfg, splits, "watermark", watermark=watermark_id(wm), alpha=cfg.embed.alpha)
    save_checkpoint(out / "marked.awck", {"encoder": marked.encoder, "head": marked.head}, meta)
    probe = train_linear_probe(marked.encoder, splits.train_x, splits.train_y,
                               cfg.probe_config(splits.ds.num_classes))
    save_checkpoint(out / "marked_downstream.awck", {"encoder": marked.encoder, "probe": probe}, meta)
    _write_csv(out / "embed_history.csv", ["epoch", "mean_loss", "con_loss", "wat_loss", "wall_time_ms"],
               [(r["epoch"], f"{r['loss']:.12g}", f"{r['con']:.12g}", f"{r['wat']:.12g}",
                 f"{r['wall_ms']:.3f}") for r in marked.history])

    clean_score = t_sim(encoder, splits.verify, wm)
    marked_score = t_sim(marked.encoder, splits.verify, wm)
    try:
        t_s = calibrate_threshold([clean_score], [marked_score])
    except CalibrationError as err:
        log.warning("threshold calibration failed: %s", err)
        t_s = None
    calib = {"t_s": t_s, "t_c": cfg.verify.t_c, "clean_t_sim": clean_score, "marked_t_sim": marked_score,
             "watermark": watermark_id(wm)}
    (out / "calibration.json").write_text(json.dumps(calib, sort_keys=True, indent=2) + "\n")
    print(f"watermark: eps={wm.epsilon:.6g} final similarity {wm.final_similarity:.4f}; "
          f"T_sim clean {clean_score:.6g} marked {marked_score:.6g}; t_s={t_s}")
    return EXIT_OK


# -- verify --------------------------------------------------------------------------------

def subprocess_predictor(command: str, workdir: Path):
    """Label function backed by an external process.

    Protocol: the verifier saves the query batch as a ``.npy`` file and writes
    one line ``<path>:<row>`` per sample to the process's stdin; the process
    answers with one integer label per line on stdout, in order.
    """
    argv = shlex.split(command)

    def predict(x: np.ndarray) -> np.ndarray:
        with tempfile.NamedTemporaryFile(suffix=".npy", dir=workdir, delete=False) as fh:
            np.save(fh, np.asarray(x, dtype=np.float64))
            path = fh.name
        try:
            lines = "".join(f"{path}:{i}\n" for i in range(len(x)))
            proc = subprocess.run(argv, input=lines, capture_output=True, text=True, check=False)
        finally:
            os.unlink(path)
        if proc.returncode != 0:
            raise UsageError(f"predictor exited with status {proc.returncode}: {proc.stderr.strip()}")
        answers = proc.stdout.split()
        if len(answers) != len(x):
            raise UsageError(f"predictor returned {len(answers)} labels for {len(x)} samples")
        return np.array([int(a) for a in answers])

    return predict


def _threshold_from(args, cfg: ExperimentConfig, wm_path: Path, mode: str) -> float:
    if args.threshold is not None:
        return args.threshold
    if mode == "black-box":
        return cfg.verify.t_c
    if cfg.verify.t_s is not None:
        return cfg.verify.t_s
    calib = wm_path.parent / "calibration.json"
    if calib.exists():
        t_s = json.loads(calib.read_text()).get("t_s")
        if t_s is not None:
            return float(t_s)
    raise UsageError("no white-box threshold: set verify.t_s, pass --threshold, or keep "
                     "calibration.json next to the watermark file")


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    if args.watermark is None:
        raise UsageError("verify needs --watermark")
    mode = {"white": "white-box", "black": "black-box"}[args.mode]
    wm_path = Path(args.watermark)
    wm = wmk.load(wm_path)
    splits = Splits(cfg)
    if int(np.prod(wm.image_shape)) != splits.ds.input_dim:
        raise UsageError(f"watermark image shape {wm.image_shape} does not match the configured data")
    flags = []
    if not np.any(wm.w_adv):
        flags.append("degenerate: zero watermark")
    threshold = _threshold_from(args, cfg, wm_path, mode)
    encoder_id = ""
    if mode == "white-box":
        if args.predictor:
            raise UsageError("white-box verification needs a checkpoint, not a predictor")
        models, _ = _load_models(args.checkpoint)
        if "encoder" not in models:
            raise UsageError("checkpoint has no encoder")
        encoder = models["encoder"]
        _check_shape(encoder, splits)
        score = t_sim(encoder, splits.verify, wm)
        samples = len(splits.verify)
        encoder_id = encoder.params.digest()[:16]
    else:
        if args.predictor:
            predict = subprocess_predictor(args.predictor, Path(tempfile.gettempdir()))
            encoder_id = "external:" + hashlib.sha256(args.predictor.encode()).hexdigest()[:16]
        else:
            models, _ = _load_models(args.checkpoint)
            if "encoder" not in models or "probe" not in models:
                raise UsageError("black-box mode needs --predictor or a checkpoint with encoder and probe")
            enc, probe = models["encoder"], models["probe"]
            _check_shape(enc, splits)
            predict = lambda x: predict_labels(enc, probe, x)  # noqa: E731
            encoder_id = enc.params.digest()[:16]
        score = t_cls(predict, splits.test_x, wm)
        samples = len(splits.test_x)
    report = verify(score, threshold, mode, encoder=encoder_id, watermark=watermark_id(wm),
                    samples=samples, flags=flags)
    out = _out_dir(cfg)
    subject = "external" if args.predictor else Path(args.checkpoint).stem
    (out / f"verify_{args.mode}_{subject}.json").write_text(report.to_json())
    print(report.summary())
    return EXIT_OK if report.verdict else EXIT_NOT_VERIFIED


# -- attack ---------------------------------------------------------------------------------

def cmd_attack(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    ckpt = Path(args.checkpoint or out / "marked.awck")
    wm_path = Path(args.watermark or ckpt.parent / "watermark.awwm")
    clean_path = Path(args.clean or ckpt.parent / "pretrain.awck")
    marked_models, _ = _load_models(ckpt)
    clean_models, _ = _load_models(clean_path)
    if not wm_path.exists():
        raise UsageError(f"watermark not found: {wm_path}")
    wm = wmk.load(wm_path)
    splits = Splits(cfg)
    for m in (marked_models, clean_models):
        if "encoder" not in m or "head" not in m:
            raise UsageError("attack checkpoints need encoder and head roles")
        _check_shape(m["encoder"], splits)
    clean = ContrastiveModel(clean_models["encoder"], clean_models["head"])
    marked = ContrastiveModel(marked_models["encoder"], marked_models["head"])
    rows = atk.attack_report(clean, marked, wm, splits.eval_data(), cfg.attack_configs(),
                             cfg.contrastive_config(), cfg.probe_config(splits.ds.num_classes),
                             seed=cfg.seed_for("attack"))
    (out / "attacks.csv").write_text(atk.attack_csv(rows))
    t_s = None
    try:
        t_s = _threshold_from(args, cfg, wm_path, "white-box")
    except UsageError:
        log.warning("no white-box threshold available; robustness verdicts omitted")
    summary = {"t_s": t_s, "pruning_monotone": atk.pruning_monotone(rows),
               "rows": [{"attack": r.attack, "t_sim_we": r.t_sim_we, "t_cls_gap": r.t_cls_gap,
                         "white_verdict": None if t_s is None else bool(r.t_sim_we < t_s)} for r in rows]}
    (out / "robustness.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    sys.stdout.write(atk.attack_csv(rows))
    return EXIT_OK


# -- report ----------------------------------------------------------------------------------

def _final_loss(path: Path) -> float:
    rows = list(csv.DictReader(path.open()))
    return float(rows[-1]["mean_loss"]) if rows else float("nan")


def _run_summary(run: Path) -> dict:
    missing = [name for name in RUN_ARTIFACTS if not (run / name).exists()]
    if missing:
        raise UsageError(f"incomplete run {run}: missing {', '.join(missing)}")
    cfg = json.loads((run / "config.resolved.json").read_text())
    wm = wmk.load(run / "watermark.awwm")
    calib = json.loads((run / "calibration.json").read_text())
    row = {
        "run": str(run), "seed": cfg["seed"], "config_hash": hashlib.sha256(
            (run / "config.resolved.json").read_bytes()).hexdigest()[:16],
        "algorithm": cfg["contrastive"]["algorithm"],
        "pretrain_final_loss": _final_loss(run / "pretrain_history.csv"),
        "embed_final_loss": _final_loss(run / "embed_history.csv"),
        "epsilon": wm.epsilon, "pgd_final_similarity": wm.final_similarity,
        "t_sim_ce": calib["clean_t_sim"], "t_sim_we": calib["marked_t_sim"], "t_s": calib["t_s"],
        "checkpoint_sha256": _file_sha(run / "marked.awck")[:16],
    }
    row["verifications"] = []
    for rep in sorted(run.glob("verify_*.json")):
        r = VerificationReport.from_json(rep.read_text())
        row["verifications"].append((rep.stem.removeprefix("verify_"), r))
    if (run / "attacks.csv").exists():
        row["attacks"] = (run / "attacks.csv").read_text()
    return row


def cmd_report(args) -> int:
    if not args.runs:
        raise UsageError("report needs at least one run directory")
    runs = [_run_summary(Path(r)) for r in args.runs]
    out = Path(args.out or args.runs[0])
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# AWEncoder run summary", ""]
    for r in runs:
        lines += [f"## {r['run']} (seed {r['seed']}, config {r['config_hash']})", "",
                  "### Phase I: pretraining", f"- algorithm: {r['algorithm']}",
                  f"- final pretraining loss: {r['pretrain_final_loss']:.6g}", "",
                  "### Phase II: watermark generation and embedding",
                  f"- epsilon: {r['epsilon']:.6g}", f"- PGD final similarity: {r['pgd_final_similarity']:.4f}",
                  f"- final joint loss: {r['embed_final_loss']:.6g}", "",
                  "### Phase III: verification",
                  "| encoder | T_sim |", "|---|---|",
                  f"| CE | {r['t_sim_ce']:.6g} |", f"| WE | {r['t_sim_we']:.6g} |",
                  "", f"- calibrated t_s: {r['t_s']}"]
        for name, rep in r["verifications"]:
            lines.append(f"- verify {name}: {rep.summary()}")
        if "attacks" in r:
            lines += ["", "### Robustness", "", "```", r["attacks"].rstrip(), "```"]
        lines.append("")
    (out / "summary.md").write_text("\n".join(lines))
    cols = ["run", "seed", "config_hash", "algorithm", "pretrain_final_loss", "embed_final_loss", "epsilon",
            "pgd_final_similarity", "t_sim_ce", "t_sim_we", "t_s", "checkpoint_sha256"]
    _write_csv(out / "summary.csv", cols, [[r[c] for c in cols] for r in runs])
    print(f"report: {len(runs)} run(s) summarised in {out / 'summary.md'}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="awencoder", description="Adversarial watermarking of contrastive encoders.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help="output directory (overrides config.out)")

    common(sub.add_parser("pretrain", help="Phase I: self-supervised pretraining"))
    sp = sub.add_parser("watermark", help="Phases II-III: generate and embed the watermark")
    common(sp)
    sp.add_argument("--checkpoint", help="pretraining checkpoint (default <out>/pretrain.awck)")
    sp = sub.add_parser("verify", help="ownership verification")
    common(sp)
    sp.add_argument("--checkpoint", help="encoder checkpoint (white) or encoder+probe checkpoint (black)")
    sp.add_argument("--watermark", help="watermark file")
    sp.add_argument("--mode", choices=("white", "black"), default="white")
    sp.add_argument("--predictor", help="black-box: external label-predictor command")
    sp.add_argument("--threshold", type=float, help="override t_s / t_c")
    sp = sub.add_parser("attack", help="removal attacks with re-verification")
    common(sp)
    sp.add_argument("--checkpoint", help="watermarked checkpoint (default <out>/marked.awck)")
    sp.add_argument("--watermark", help="watermark file (default next to the checkpoint)")
    sp.add_argument("--clean", help="clean pretraining checkpoint (default next to the checkpoint)")
    sp.add_argument("--threshold", type=float, help="override t_s")
    sp = sub.add_parser("report", help="summarise run directories")
    sp.add_argument("runs", nargs="*", help="run directories")
    sp.add_argument("--out", help="where to write summary.md / summary.csv")
    return p


COMMANDS = {"pretrain": cmd_pretrain, "watermark": cmd_watermark, "verify": cmd_verify, "attack": cmd_attack}


def _limit_threads():
    n = os.environ.get("AWENC_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads()
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        return COMMANDS[args.command](cfg, args)
    except ValidationError as err:
        bad = ", ".join(".".join(str(p) for p in e["loc"]) for e in err.errors())
        print(f"error: invalid config; offending fields: {bad}\n{err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, TrainingDiverged, GraphError, FloatingPointError) as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CheckpointError, wmk.WatermarkFormatError, dat.DatasetFormatError,
            FileNotFoundError, ValueError, yaml.YAMLError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
