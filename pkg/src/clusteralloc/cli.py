"""Pipeline orchestration: generate, train, cluster, solve, distill, evaluate.

Every stage is callable standalone and reads its inputs from the output
directory, so deleting an intermediate artifact and re-running the pipeline
resumes from that stage. All artifacts are byte-deterministic given the
config, and ``manifest.json`` records the hash of every output per stage.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import SolverConfig, build_strategy_library, library_from_dict, library_to_dict
from .baselines import (
    DflConfig,
    lagrangian_allocate,
    heuristic_allocate,
    load_slearner,
    load_two_model,
    save_slearner,
    save_two_model,
    train_dfl,
    train_slearner,
    train_two_model,
)
from .cluster import (
    assign,
    cluster_model_from_dict,
    cluster_model_to_dict,
    cluster_stats,
    cluster_stats_from_dict,
    cluster_stats_to_dict,
    kmeans_fit,
)
from .config import RunConfig, gen_config_from_run, load_config
from .data import DatasetKind, load_dataset, save_dataset
from .errors import ClusterAllocError, ConfigError
from .evaluation import Policy, compare, eom_curve, hrc_policy, report_to_csv, report_to_json
from .nn import TrainConfig
from .repnet import (
    distill,
    embed,
    load_classifier,
    load_repnet,
    save_classifier,
    save_repnet,
    train_repnet,
)
from .synthgen import generate_obs, generate_rct, ground_truth_to_dict

STAGES = ("gen", "train", "cluster", "solve", "distill", "eval")


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _read_json(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Resolved config plus artifact paths and dataset plumbing."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = config.out_dir
        self.paths = {
            "gen": [self.out / "train.csv", self.out / "test.csv", self.out / "ground_truth.json"],
            "train": [self.out / "repnet.ckpt"],
            "cluster": [self.out / "cluster_model.json", self.out / "cluster_stats.json"],
            "solve": [self.out / "strategy_library.json"],
            "distill": [self.out / "classifier.ckpt"],
            "eval": [self.out / "eval_report.csv", self.out / "eval_report.json"],
        }

    # -- dataset access ----------------------------------------------------
    def _gen_config(self, n: int, seed_offset: int):
        return gen_config_from_run(self.config, n, self.config.seed + seed_offset)

    def train_dataset(self):
        kind = DatasetKind(self.config["gen.kind"])
        cfg = self._gen_config(self.config["gen.n_train"], 0)
        return load_dataset(self.out / "train.csv", cfg.treatment_set(), kind)

    def test_dataset(self):
        # evaluation data is always randomized
        cfg = self._gen_config(self.config["gen.n_test"], 1)
        return load_dataset(self.out / "test.csv", cfg.treatment_set(), DatasetKind.RCT)

    def train_config(self, section: str) -> TrainConfig:
        sec = self.config.values[section]
        return TrainConfig(
            learning_rate=sec["learning_rate"],
            epochs=sec["epochs"],
            batch_size=sec["batch_size"],
            weight_decay=sec.get("weight_decay", 0.0),
            seed=self.config.seed,
        )

    # -- stages ------------------------------------------------------------
    def stage_gen(self):
        train_cfg = self._gen_config(self.config["gen.n_train"], 0)
        if self.config["gen.kind"] == "obs":
            train_set, truth = generate_obs(train_cfg)
        else:
            train_set, truth = generate_rct(train_cfg)
        test_cfg = self._gen_config(self.config["gen.n_test"], 1)
        test_set, _ = generate_rct(test_cfg.with_(obs_bias=0.0, contamination=0.0))
        self.out.mkdir(parents=True, exist_ok=True)
        save_dataset(train_set, self.out / "train.csv")
        save_dataset(test_set, self.out / "test.csv")
        _write_json(self.out / "ground_truth.json", ground_truth_to_dict(truth))

    def stage_train(self):
        sec = self.config.values["repnet"]
        net, _ = train_repnet(
            self.train_dataset(),
            head=sec["head"],
            d_z=sec["d_z"],
            alpha=sec["alpha"],
            config=self.train_config("repnet"),
            hidden=tuple(sec["hidden"]),
            repeat_dim=sec["repeat_dim"],
        )
        save_repnet(self.out / "repnet.ckpt", net)

    def stage_cluster(self):
        sec = self.config.values["cluster"]
        dataset = self.train_dataset()
        net = load_repnet(self.out / "repnet.ckpt")
        z = embed(net, dataset.features)
        k = min(sec["k"], dataset.n)
        model = kmeans_fit(z, k, max_iters=sec["max_iters"], n_init=sec["n_init"], seed=self.config.seed)
        stats = cluster_stats(dataset, assign(model, z), k, repnet=net)
        _write_json(self.out / "cluster_model.json", cluster_model_to_dict(model))
        _write_json(self.out / "cluster_stats.json", cluster_stats_to_dict(stats))

    def stage_solve(self):
        sec = self.config.values["solver"]
        stats = cluster_stats_from_dict(_read_json(self.out / "cluster_stats.json"))
        grid = np.asarray(sec["budgets_per_individual"]) * stats.n
        solver_cfg = SolverConfig(
            budget_grid=grid, lam=sec["lambda"], kappa=sec["kappa"], method=sec["method"]
        )
        library = build_strategy_library(stats, solver_cfg)
        _write_json(self.out / "strategy_library.json", library_to_dict(library))

    def stage_distill(self):
        dataset = self.train_dataset()
        net = load_repnet(self.out / "repnet.ckpt")
        model = cluster_model_from_dict(_read_json(self.out / "cluster_model.json"))
        sec = self.config.values["distill"]
        classifier, _ = distill(
            net,
            model,
            dataset,
            TrainConfig(
                learning_rate=sec["learning_rate"],
                epochs=sec["epochs"],
                batch_size=sec["batch_size"],
                seed=self.config.seed,
            ),
            hidden=tuple(sec["hidden"]),
        )
        save_classifier(self.out / "classifier.ckpt", classifier)

    def hrc_family(self):
        classifier = load_classifier(self.out / "classifier.ckpt")
        library = library_from_dict(_read_json(self.out / "strategy_library.json"))
        n_train = self.config["gen.n_train"]

        def family(budget_pc: float) -> Policy:
            return hrc_policy(classifier, library, budget_pc * n_train, name="hrc")

        return family

    def stage_eval(self):
        test_set = self.test_dataset()
        budgets = self.config["solver.budgets_per_individual"]
        curve = eom_curve(test_set, self.hrc_family(), budgets)
        report = {
            "rows": [
                {
                    "family": "hrc",
                    "budget": b,
                    "revenue": est.revenue_mean,
                    "revenue_se": est.revenue_se,
                    "cost": est.cost_mean,
                    "cost_se": est.cost_se,
                    "match_count": est.match_count,
                    "degenerate": est.degenerate,
                }
                for b, est in curve
            ],
            "winners": {b: "hrc" for b, _ in curve},
        }
        report_to_csv(report, self.out / "eval_report.csv")
        report_to_json(report, self.out / "eval_report.json")

    def stage_compare(self):
        train_set = self.train_dataset()
        test_set = self.test_dataset()
        budgets = self.config["solver.budgets_per_individual"]
        n_test = test_set.n
        cfg = self.train_config("baselines")
        sec = self.config.values["baselines"]
        hidden = tuple(sec["hidden"])
        families = {"hrc": self.hrc_family()}

        if "heuristic" in sec["policies"]:
            path = self.out / "slearner.ckpt"
            if path.exists():
                slearner = load_slearner(path)
            else:
                slearner, _ = train_slearner(train_set, cfg, hidden)
                save_slearner(path, slearner)
            unit_costs = _arm_unit_costs(train_set)

            def heuristic_family(b: float, model=slearner, uc=unit_costs) -> Policy:
                def fn(x):
                    return heuristic_allocate(model, x, b * x.shape[0], uc).choice

                return Policy(name="heuristic", fn=fn, budget=b)

            families["heuristic"] = heuristic_family

        for name, trainer in (("lagrangian", "two_model"), ("dfl", "dfl")):
            if name not in sec["policies"]:
                continue
            path = self.out / f"{trainer}.ckpt"
            if path.exists():
                model = load_two_model(path, kind=trainer)
            elif name == "lagrangian":
                model, _ = train_two_model(train_set, cfg, hidden)
                save_two_model(path, model, kind=trainer)
            else:
                dfl_cfg = DflConfig(
                    lambda_list=tuple(sec["dfl_lambda_list"]),
                    temperature=sec["dfl_temperature"],
                    theta_d=sec["dfl_theta_d"],
                    theta_r=sec["dfl_theta_r"],
                    theta_c=sec["dfl_theta_c"],
                )
                model, _ = train_dfl(train_set, dfl_cfg, cfg, hidden)
                save_two_model(path, model, kind=trainer)

            def family(b: float, model=model, name=name) -> Policy:
                def fn(x):
                    return lagrangian_allocate(model, x, b * x.shape[0]).choice

                return Policy(name=name, fn=fn, budget=b)

            families[name] = family

        report = compare(families, test_set, budgets)
        report_to_csv(report, self.out / "compare_report.csv")
        report_to_json(report, self.out / "compare_report.json")

    def run_stage(self, name: str):
        {
            "gen": self.stage_gen,
            "train": self.stage_train,
            "cluster": self.stage_cluster,
            "solve": self.stage_solve,
            "distill": self.stage_distill,
            "eval": self.stage_eval,
            "compare": self.stage_compare,
        }[name]()

    def outputs_exist(self, stage: str) -> bool:
        return all(p.exists() for p in self.paths[stage])

    def update_manifest(self, completed: list[str]) -> None:
        manifest_path = self.out / "manifest.json"
        manifest = _read_json(manifest_path) if manifest_path.exists() else {"stages": {}}
        manifest["version"] = __version__
        manifest["config_sha256"] = hashlib.sha256(
            self.config.canonical_json().encode()
        ).hexdigest()
        manifest["seed"] = self.config.seed
        for stage in completed:
            manifest["stages"][stage] = {
                "outputs": {p.name: _sha256(p) for p in self.paths.get(stage, []) if p.exists()}
            }
        _write_json(manifest_path, manifest)

    def manifest_matches(self, stage: str) -> bool:
        manifest_path = self.out / "manifest.json"
        if not manifest_path.exists():
            return True
        recorded = _read_json(manifest_path).get("stages", {}).get(stage, {}).get("outputs")
        if recorded is None:
            return True
        return all(
            p.name in recorded and _sha256(p) == recorded[p.name]
            for p in self.paths.get(stage, [])
        )


def _arm_unit_costs(dataset) -> np.ndarray:
    m = dataset.treatment_set.count
    costs = np.zeros(m)
    for j in range(m):
        mask = dataset.treatment == j
        if mask.any():
            costs[j] = dataset.cost[mask].mean()
    return costs


def cmd_pipeline(run: Run, only_stage: str | None = None) -> None:
    stages = [only_stage] if only_stage else list(STAGES)
    completed = []
    for stage in stages:
        if only_stage is None and run.outputs_exist(stage) and run.manifest_matches(stage):
            print(f"[{stage}] up to date, skipping")
            continue
        print(f"[{stage}] running")
        try:
            run.run_stage(stage)
        except (ClusterAllocError, FileNotFoundError) as exc:
            raise StageError(stage, exc) from exc
        completed.append(stage)
    run.update_manifest(completed)


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clusteralloc",
        description="Cluster-level budget allocation pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "compare", "pipeline"):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run all stages")
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        if name == "pipeline":
            p.add_argument("--stage", choices=(*STAGES, "compare"), help="run only this stage")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        overrides = dict(config.values)
        if args.out is not None:
            overrides["out_dir"] = args.out
        if args.seed is not None:
            overrides["seed"] = args.seed
        from .config import parse_config

        config = parse_config(overrides, source_path=config.source_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    run = Run(config)
    try:
        if args.command == "pipeline":
            cmd_pipeline(run, only_stage=args.stage)
        else:
            try:
                run.run_stage(args.command)
            except (ClusterAllocError, FileNotFoundError) as exc:
                raise StageError(args.command, exc) from exc
            run.update_manifest([args.command])
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
