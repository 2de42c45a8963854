"""
Command-line entry point for the referencing pipeline.

    python scripts/run_pipeline.py [global flags] <command> [command flags]

Commands:
    gen        simulate a multi-user corpus
    train      train the fusion network on a corpus, write checkpoint + history
    eval       score a checkpoint, or run the modality ablation / leave-one-out
    match      rank the ROIs for one fused direction
    transform  geodetic -> ECEF (-> car frame) conversion

Exit codes: 0 success, 1 usage, 2 data/format error, 3 numerical failure.
"""
import argparse
import json
import logging
import os
import sys
import traceback
from typing import Dict, List, Optional

import numpy as np

SCRIPTS_DIR = os.path.dirname(os.path.abspath(__file__))
REPO_ROOT = os.path.dirname(SCRIPTS_DIR)

# Make the engine package and env_loader importable when run as a script
sys.path.insert(0, REPO_ROOT)
sys.path.insert(0, SCRIPTS_DIR)

from env_loader import load_env  # noqa: E402
from refpoint_engine.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from refpoint_engine.config import RunConfig, build_run_config  # noqa: E402
from refpoint_engine.corpus import SCENARIO_NAME, load_corpus, build_dataset  # noqa: E402
from refpoint_engine.errors import EmptySplitError, RefpointError, UsageError  # noqa: E402
from refpoint_engine.evaluation import (  # noqa: E402
    MODALITY_SUBSETS,
    EvalReport,
    evaluate_model,
    per_user_report,
    run_ablation,
    write_report,
)
from refpoint_engine.fusion import train  # noqa: E402
from refpoint_engine.geo import GeodeticPoint, wgs84_to_ecef  # noqa: E402
from refpoint_engine.matching import match_roi  # noqa: E402
from refpoint_engine.scenario import REF_TYPES, load_scenario  # noqa: E402
from refpoint_engine.synth import (  # noqa: E402
    OcclusionModel,
    build_default_scenario,
    generate_corpus,
    profiles_from_config,
)

LOG_FORMAT = '%(asctime)s - [REFPOINT] - %(levelname)s - %(message)s'

logger = logging.getLogger("refpoint")

# path-valued flags, resolved by build_run_config before any command runs
PATH_ARGS = ("scenario", "corpus", "checkpoint", "out", "history")
OUTPUT_ARGS = ("out", "history")


def configure_logging(level: str = "INFO", log_file: Optional[str] = "refpoint.log"):
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        handlers=handlers, force=True)


def _csv_list(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    items = [v.strip() for v in value.split(",") if v.strip()]
    return items or None


def _int_list(value: Optional[str]) -> Optional[List[int]]:
    items = _csv_list(value)
    if items is None:
        return None
    try:
        return [int(v) for v in items]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="run_pipeline", description="Multimodal driver referencing pipeline")
    parser.add_argument("--seed", type=int, default=None, help="master seed (falls back to $REFPOINT_SEED, then 0)")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=3 (repeatable)")
    parser.add_argument("--jobs", type=int, default=None, help="worker threads for generation and evaluation")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--log-file", default="refpoint.log", help="log file ('' disables)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="simulate a corpus")
    gen.add_argument("--scenario", default=None, help="scenario JSON (default: built-in five-ROI layout)")
    gen.add_argument("--users", type=int, default=4)
    gen.add_argument("--events-per-user", type=int, default=40)
    gen.add_argument("--ref-types", default=",".join(REF_TYPES))
    gen.add_argument("--out", required=True, help="corpus directory to create")

    tr = sub.add_parser("train", help="train the fusion network")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--history", default=None, help="per-epoch history CSV (default: <out>.history.csv)")
    tr.add_argument("--train-users", default=None, help="comma-separated user ids")
    tr.add_argument("--val-users", default=None, help="comma-separated user ids")
    tr.add_argument("--test-users", default=None, help="users held out entirely")
    tr.add_argument("--ref-type", default=None, choices=REF_TYPES)
    tr.add_argument("--poses", default=None, help="comma-separated car pose ids")
    tr.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")

    ev = sub.add_parser("eval", help="evaluate a checkpoint or run an ablation")
    ev.add_argument("--corpus", required=True)
    mode = ev.add_mutually_exclusive_group(required=True)
    mode.add_argument("--checkpoint", default=None)
    mode.add_argument("--ablation", default=None, help=f"modality subsets, e.g. {','.join(MODALITY_SUBSETS)}")
    mode.add_argument("--per-user", action="store_true", help="leave-one-user-out analysis")
    ev.add_argument("--users", default=None, help="restrict checkpoint scoring to these users")
    ev.add_argument("--ref-types", default=None)
    ev.add_argument("--poses", default=None)
    ev.add_argument("--no-all-poses", action="store_true", help="skip the combined all-pose rows")
    ev.add_argument("--out", required=True, help="report path prefix (<out>.csv, <out>.txt)")

    ma = sub.add_parser("match", help="rank ROIs for a fused vector")
    ma.add_argument("--vector", nargs=3, type=float, required=True, metavar=("X", "Y", "Z"))
    ma.add_argument("--scenario", default=None)
    ma.add_argument("--pose", type=int, required=True)
    ma.add_argument("--method", default=None, choices=("direction_box", "ray_box"))

    tf = sub.add_parser("transform", help="geodetic to ECEF / car frame")
    tf.add_argument("--lat", type=float, required=True, help="degrees")
    tf.add_argument("--lon", type=float, required=True, help="degrees")
    tf.add_argument("--alt", type=float, default=0.0, help="meters")
    tf.add_argument("--scenario", default=None)
    tf.add_argument("--pose", type=int, default=None, help="also express the point in this car pose's frame")
    return parser


class RefpointPipeline:
    """Runs one subcommand against a resolved RunConfig."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    def _scenario(self, path: Optional[str]):
        return load_scenario(path) if path else build_default_scenario()

    def cmd_gen(self, args) -> Dict:
        scenario = self._scenario(args.scenario)
        ref_types = _csv_list(args.ref_types) or list(REF_TYPES)
        unknown = set(ref_types) - set(REF_TYPES)
        if unknown:
            raise UsageError(f"unknown reference types {sorted(unknown)}")
        manifest, events = generate_corpus(
            scenario, args.users, args.events_per_user, self.cfg.seed, out_dir=args.out,
            ref_types=ref_types, profiles=profiles_from_config(self.cfg.profile),
            occ=OcclusionModel.from_config(self.cfg.occlusion), jobs=self.cfg.jobs)
        summary = {"out": args.out, "users": len(manifest.users), "events": len(events),
                   "per_user": {u.id: u.n_events for u in manifest.users}, "seed": self.cfg.seed}
        logger.info(f"✅ Generated {len(events)} events for {len(manifest.users)} users into {args.out}")
        return summary

    def _dataset(self, corpus_dir: str):
        _, events = load_corpus(corpus_dir, self.cfg.jobs)
        scenario = load_scenario(os.path.join(corpus_dir, SCENARIO_NAME))
        return build_dataset(events, self.cfg.jobs), scenario

    def split_users(self, users: List[str], train_users, val_users, test_users):
        """Explicit lists win; otherwise a seeded validation_fraction of the remaining users."""
        known = set(users)
        for name, given in (("train", train_users), ("validation", val_users), ("test", test_users)):
            missing = set(given or []) - known
            if missing:
                raise EmptySplitError(f"{name} users not in corpus: {sorted(missing)}")
        test = set(test_users or [])
        explicit = [set(s) for s in (train_users, val_users) if s]
        for s in explicit:
            if s & test:
                raise EmptySplitError(f"users {sorted(s & test)} are listed as test users too")
        if train_users and val_users and set(train_users) & set(val_users):
            raise EmptySplitError(f"users {sorted(set(train_users) & set(val_users))} are in train and validation")

        pool = [u for u in users if u not in test]
        if val_users is None:
            candidates = [u for u in pool if u not in set(train_users or [])]
            rng = np.random.default_rng(self.cfg.seed)
            n_val = max(1, int(round(self.cfg.train.validation_fraction * len(pool))))
            val_users = sorted(rng.permutation(candidates)[:n_val].tolist()) if candidates else []
        if train_users is None:
            train_users = [u for u in pool if u not in set(val_users)]
        if not train_users or not val_users:
            raise EmptySplitError(f"split leaves {len(train_users)} train and {len(val_users)} validation users")
        return sorted(train_users), sorted(val_users), sorted(test)

    def cmd_train(self, args) -> Dict:
        dataset, _ = self._dataset(args.corpus)
        if args.ref_type or args.poses:
            dataset = dataset.filter(pose_ids=_int_list(args.poses), ref_type=args.ref_type).require(
                f"ref_type={args.ref_type} poses={args.poses}")
        train_users, val_users, test_users = self.split_users(
            dataset.user_ids, _csv_list(args.train_users), _csv_list(args.val_users), _csv_list(args.test_users))
        logger.info(f"📊 Split: {len(train_users)} train, {len(val_users)} validation, {len(test_users)} test users")

        resume = None
        if args.resume:
            model, header, state = load_checkpoint(args.out, self.cfg.train.dtype)
            if state is None:
                raise UsageError(f"{args.out} holds no optimizer state to resume from")
            if header.config != self.cfg.network:
                raise UsageError("network config differs from the checkpoint being resumed")
            resume = (model, state)
            logger.info(f"🔄 Resuming from epoch {state.epochs_done} of {args.out}")

        model, history, state = train(
            dataset.filter(users=train_users), dataset.filter(users=val_users),
            self.cfg.network, self.cfg.train, forbidden_users=test_users, resume=resume)
        metrics = {"best_val_mad_deg": float(np.degrees(history.val_loss[history.best_epoch])),
                   "best_train_mad_deg": float(np.degrees(history.train_loss[history.best_epoch]))}
        save_checkpoint(args.out, model, self.cfg.train.seed, history, metrics, state)
        history_path = args.history or f"{args.out}.history.csv"
        history.to_frame().to_csv(history_path, index=False)
        logger.info(f"💾 History written to {history_path}")
        return {"checkpoint": args.out, "history": history_path, "epochs": len(history.train_loss),
                "best_epoch": history.best_epoch + 1, **metrics}

    def cmd_eval(self, args) -> Dict:
        dataset, scenario = self._dataset(args.corpus)
        ref_types = _csv_list(args.ref_types) or sorted(dataset.meta["ref_type"].unique())
        poses = _int_list(args.poses)
        method = self.cfg.eval.match_method
        report = EvalReport()
        if args.checkpoint:
            model, _, _ = load_checkpoint(args.checkpoint)
            data = dataset.filter(pose_ids=poses, users=_csv_list(args.users))
            for ref_type in ref_types:
                part = data.filter(ref_type=ref_type).require(f"ref_type={ref_type}")
                report = report.merge(evaluate_model(model, part, scenario, method))
        elif args.per_user:
            data = dataset.filter(pose_ids=poses)
            for ref_type in ref_types:
                report = report.merge(per_user_report(data, scenario, self.cfg.network, self.cfg.train,
                                                      self.cfg.eval, ref_type=ref_type))
        else:
            subsets = _csv_list(args.ablation)
            unknown = set(subsets) - set(MODALITY_SUBSETS)
            if unknown:
                raise UsageError(f"unknown modality subsets {sorted(unknown)}; choose from {list(MODALITY_SUBSETS)}")
            for ref_type in ref_types:
                report = report.merge(run_ablation(
                    dataset, scenario, ref_type, self.cfg.network, self.cfg.train, self.cfg.eval,
                    subsets=subsets, poses=poses, include_all=not args.no_all_poses, seed=self.cfg.seed))
        written = write_report(report, args.out)
        print(report.to_text())
        return {"rows": len(report.rows), "user_rows": len(report.user_rows), **written}

    def cmd_match(self, args) -> Dict:
        scenario = self._scenario(args.scenario)
        pose = scenario.pose(args.pose)
        result = match_roi(args.vector, scenario.roi_map(), pose.transform,
                           args.method or self.cfg.eval.match_method)
        return {"pose": args.pose, **result.to_dict()}

    def cmd_transform(self, args) -> Dict:
        point = GeodeticPoint.from_degrees(args.lat, args.lon, args.alt)
        ecef = wgs84_to_ecef(point)
        out = {"geodetic_deg": [args.lat, args.lon, args.alt], "ecef": ecef.as_array().tolist()}
        if args.pose is not None:
            pose = self._scenario(args.scenario).pose(args.pose)
            out["car"] = pose.transform.apply(ecef.as_array()).tolist()
            out["pose"] = args.pose
        return out

    def run(self, args) -> Dict:
        args = argparse.Namespace(**{**vars(args), **self.cfg.paths})
        handler = getattr(self, f"cmd_{args.command}")
        return handler(args)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad arguments; usage problems are exit 1 here
        return 0 if e.code == 0 else 1
    configure_logging(args.log_level, args.log_file or None)
    load_env()
    try:
        paths = {key: getattr(args, key, None) for key in PATH_ARGS}
        cfg = build_run_config(args.config, args.overrides, seed=args.seed, jobs=args.jobs, paths=paths)
        cfg.require_parent_dirs([key for key in OUTPUT_ARGS if key in cfg.paths])
        result = RefpointPipeline(cfg).run(args)
    except RefpointError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("🛑 Interrupted by user")
        return 1
    except Exception as e:
        logger.error(f"❌ Unexpected error: {type(e).__name__}: {e}")
        logger.error(f"Traceback: {traceback.format_exc()}")
        return 1
    if args.command != "eval":
        print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
