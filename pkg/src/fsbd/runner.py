"""End-to-end experiment execution.

Builds datasets and the model, wires the configured adversary and aggregator
into the round loop, measures per-round accuracies, and writes the artifact
set: metrics.csv (schema-versioned), checkpoints, trigger manifest + tensors,
masks, and a provenance record. Also hosts the sweep drivers, which run the
shared pre-injection prefix once and branch per sweep value.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import platform
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, attack, checkpoint, fl, metrics, nn, robust
from .config import DatasetConfig, ExperimentConfig
from .data import Dataset, iid_partition, load_idx, synthetic
from .errors import ConfigError, InputError
from .seeding import derive_rng

CSV_SCHEMA = "# fsbd-metrics-v1"
CSV_FIELDS = ("round", "acc_main", "acc_backdoor", "aggregator", "adversary_active", "seed")


def build_datasets(cfg: DatasetConfig) -> tuple[Dataset, Dataset]:
    if cfg.kind == "idx":
        train = load_idx(cfg.train_images, cfg.train_labels)
        test = load_idx(cfg.test_images, cfg.test_labels)
        if cfg.train_limit:
            train = train.subset(np.arange(min(cfg.train_limit, len(train))))
        if cfg.test_limit:
            test = test.subset(np.arange(min(cfg.test_limit, len(test))))
        return train, test
    train = synthetic(cfg.classes, cfg.per_class, cfg.seed_train)
    test = synthetic(cfg.classes, cfg.test_per_class, cfg.seed_test)
    return train, test


def make_aggregator(config: ExperimentConfig):
    """(callable for run_rounds, mutable defense state or None)."""
    if config.aggregator == "fedavg":
        return (lambda model, updates, r: fl.fedavg_aggregate(model, updates)), None
    if config.aggregator == "krum":
        f = config.resolved_krum_f()
        return (lambda model, updates, r: robust.krum_aggregate(model, updates, f)), None
    state = robust.FoolsGoldState(config.foolsgold_logit_base)
    return (lambda model, updates, r: robust.foolsgold_aggregate(model, updates, state)), state


@dataclass
class InjectionRecord:
    round: int
    base_model: nn.Model                      # broadcast global the attack was built on
    malicious_model: nn.Model
    eval_triggers: attack.TriggerSet
    inject_triggers: Optional[attack.TriggerSet] = None
    masks: dict = field(default_factory=dict)


class InjectionPointReached(Exception):
    """Raised by a dry-run adversary so sweep drivers can branch at the injection round."""

    def __init__(self, ctx: fl.AdversaryContext, window: attack.AnalysisWindow):
        super().__init__("injection point reached")
        self.ctx = ctx
        self.window = window


class MaskedInjectionAdversary:
    """Analysis-window attacker: observes when selected, injects once at the target point.

    Before injection (and after it) the malicious participant transmits its
    honest update. The wire format adapts to the aggregator: weighted-average
    aggregators receive the scaled replacement delta; Krum receives the plain
    delta, which the near-zero masked modification keeps central enough to win
    selection at a converged model.
    """

    def __init__(self, config: ExperimentConfig, eval_test: Dataset, masked: bool = True,
                 dry_run: bool = False):
        self.config = config
        self.eval_test = eval_test
        self.masked = masked
        self.dry_run = dry_run
        self.window = attack.AnalysisWindow()
        self.record: Optional[InjectionRecord] = None

    def _should_inject(self, round_no: int) -> bool:
        kind, value = self.config.injection_round_target()
        if kind == "window":
            return len(self.window) >= value
        return round_no >= int(value) and len(self.window) >= 2

    def __call__(self, ctx: fl.AdversaryContext) -> fl.UpdateMessage:
        attack.record_snapshot(self.window, ctx.global_model, ctx.round)
        if self.record is not None or not self._should_inject(ctx.round):
            return ctx.benign_update
        if self.dry_run:
            raise InjectionPointReached(ctx, self.window)
        self.record = build_injection(self.config, ctx, self.window, self.eval_test, self.masked)
        return malicious_wire_message(self.config, ctx, self.record.malicious_model)


def build_injection(config: ExperimentConfig, ctx: fl.AdversaryContext,
                    window: attack.AnalysisWindow, eval_test: Dataset,
                    masked: bool = True) -> InjectionRecord:
    """Masks, triggers and the malicious local model for one injection point."""
    bcfg = config.backdoor
    g_model = ctx.global_model
    if masked:
        stable = attack.stability_mask(window, bcfg.t_delta, bcfg.variance_ddof)
        unimportant = attack.low_importance_mask(g_model, ctx.shard)
        mask = attack.backdoor_mask(stable, unimportant)
        masks = {"stability": stable, "low_importance": unimportant, "backdoor": mask}
    else:
        mask = attack.ParamMask(np.ones(g_model.params.size, bool))
        masks = {"backdoor": mask}
    inject_count = config.inject_trigger_count or bcfg.trigger_count
    inject_triggers = attack.trigger_test_set(g_model, ctx.shard, bcfg, count=inject_count)
    malicious = attack.inject_backdoor(g_model, mask, inject_triggers, bcfg)
    eval_triggers = attack.trigger_test_set(g_model, eval_test, bcfg)
    return InjectionRecord(ctx.round, g_model, malicious, eval_triggers, inject_triggers, masks)


def malicious_wire_message(config: ExperimentConfig, ctx: fl.AdversaryContext,
                           malicious: nn.Model) -> fl.UpdateMessage:
    if config.aggregator == "krum":
        delta = malicious.params - ctx.global_model.params
        return fl.UpdateMessage(ctx.participant_id, delta, ctx.benign_update.data_count)
    return attack.model_replacement(ctx.global_model, malicious, ctx.round_data_count,
                                    ctx.benign_update.data_count, ctx.participant_id)


class CrossTriggerAdversary:
    """Traditional fixed-trigger poisoning, single-shot or continuous."""

    def __init__(self, config: ExperimentConfig, eval_test: Dataset, continuous: bool):
        self.config = config
        self.continuous = continuous
        self.selections = 0
        self.record: Optional[InjectionRecord] = None
        self.eval_triggers = attack.cross_trigger_set(eval_test, config.backdoor)
        self.stopped = False

    def __call__(self, ctx: fl.AdversaryContext) -> fl.UpdateMessage:
        self.selections += 1
        kind, value = self.config.injection_round_target()
        at_point = (self.selections >= value) if kind == "window" else (ctx.round >= int(value))
        if self.continuous:
            if self.stopped:
                return ctx.benign_update
            poisoned = attack.baseline_cross_attack(
                ctx.global_model, ctx.shard, self.config.backdoor,
                batch_size=ctx.config.batch_size,
                rng=derive_rng(ctx.config.seed, "baseline-cross", ctx.round, ctx.participant_id))
            if at_point:
                # last poisoned upload; persistence is measured from here on
                self.stopped = True
                self.record = InjectionRecord(ctx.round, ctx.global_model, poisoned, self.eval_triggers)
            return fl.UpdateMessage(ctx.participant_id, poisoned.params - ctx.global_model.params,
                                    ctx.benign_update.data_count)
        if self.record is not None or not at_point:
            return ctx.benign_update
        poisoned = attack.baseline_cross_attack(
            ctx.global_model, ctx.shard, self.config.backdoor,
            batch_size=ctx.config.batch_size,
            rng=derive_rng(ctx.config.seed, "baseline-cross", ctx.round, ctx.participant_id))
        self.record = InjectionRecord(ctx.round, ctx.global_model, poisoned, self.eval_triggers)
        return malicious_wire_message(self.config, ctx, poisoned)


def make_adversary(config: ExperimentConfig, eval_test: Dataset, dry_run: bool = False):
    mode = config.attack_mode
    if mode == "none":
        return None
    if mode == "perdoor":
        return MaskedInjectionAdversary(config, eval_test, masked=True, dry_run=dry_run)
    if mode == "adversarial-only":
        return MaskedInjectionAdversary(config, eval_test, masked=False, dry_run=dry_run)
    if mode == "baseline-single-shot":
        return CrossTriggerAdversary(config, eval_test, continuous=False)
    if mode == "baseline-continuous":
        return CrossTriggerAdversary(config, eval_test, continuous=True)
    raise ConfigError(f"attack.mode: unknown mode {mode}")


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(repr(config).encode()).hexdigest()


class ExperimentRunner:
    """One configured experiment: data, model, adversary, metrics, artifacts."""

    def __init__(self, config: ExperimentConfig, threads: int = 1):
        self.config = config
        self.threads = threads
        self.train, self.test = build_datasets(config.dataset)
        if self.test.classes < max(config.backdoor.source_label, config.backdoor.target_label) + 1:
            raise ConfigError("attack.source_label/target_label: label outside dataset classes")
        self.partition = iid_partition(self.train, config.rounds.n, config.seed)
        self.topology = nn.small_cnn(self.train.input_shape, self.train.classes)
        self.state = fl.GlobalState(nn.init_model(self.topology, config.seed))
        limit = config.eval_limit or len(self.test)
        self.eval_test = self.test.subset(np.arange(min(limit, len(self.test))))
        self.adversary = make_adversary(config, self.test)
        self.aggregator, self.defense_state = make_aggregator(config)
        self.post_snapshots: list[np.ndarray] = []
        self.log: list[dict] = []

    # -------------------------------------------------------------- hooks

    def _injection_record(self) -> Optional[InjectionRecord]:
        return getattr(self.adversary, "record", None)

    def _metric_hook(self, round_no: int, model: nn.Model, adversary_active: bool) -> dict:
        rec = self._injection_record()
        if rec is not None:
            acc_b = metrics.acc_backdoor(model, rec.eval_triggers)
            if len(self.post_snapshots) < 500:
                self.post_snapshots.append(model.params.values.copy())
        else:
            acc_b = metrics.source_misclassification(
                model, self.eval_test, self.config.backdoor.source_label,
                self.config.backdoor.target_label)
        return {"acc_main": metrics.acc_main(model, self.eval_test), "acc_backdoor": acc_b}

    # ---------------------------------------------------------------- run

    def run(self, out_dir=None) -> list[dict]:
        out = Path(out_dir if out_dir is not None else self.config.out)
        out.mkdir(parents=True, exist_ok=True)
        started = time.time()
        csv_path = out / "metrics.csv"
        failure: Optional[BaseException] = None
        with open(csv_path, "w", newline="") as f:
            f.write(CSV_SCHEMA + "\n")
            writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator="\n")
            writer.writeheader()

            def on_round(round_no, model, adversary_active):
                row = self._metric_hook(round_no, model, adversary_active)
                writer.writerow({
                    "round": round_no,
                    "acc_main": f"{row['acc_main']:.6f}",
                    "acc_backdoor": f"{row['acc_backdoor']:.6f}",
                    "aggregator": self.config.aggregator,
                    "adversary_active": int(adversary_active),
                    "seed": self.config.seed,
                })
                f.flush()
                self._maybe_checkpoint(out, round_no, model)
                return row

            try:
                self.log = fl.run_rounds(self.state, self.config.rounds, self.train, self.partition,
                                         aggregator=self.aggregator, adversary=self.adversary,
                                         metric_hooks=(on_round,), threads=self.threads)
            except fl.RoundFailure as e:
                writer.writerow({"round": e.round, "acc_main": "FAILED", "acc_backdoor": "FAILED",
                                 "aggregator": self.config.aggregator, "adversary_active": "",
                                 "seed": self.config.seed})
                failure = e
        self._write_artifacts(out, started, failure)
        if failure is not None:
            raise failure
        return self.log

    def _maybe_checkpoint(self, out: Path, round_no: int, model: nn.Model) -> None:
        rec = self._injection_record()
        every = self.config.checkpoint_every
        at_injection = rec is not None and rec.round == round_no
        if (every and round_no % every == 0) or at_injection:
            checkpoint.save_params(out / f"ckpt_r{round_no:05d}.fsbd", model.params)

    def _write_artifacts(self, out: Path, started: float, failure) -> None:
        rec = self._injection_record()
        if rec is not None:
            checkpoint.save_params(out / "injection_base.fsbd", rec.base_model.params)
            checkpoint.save_params(out / "malicious_local.fsbd", rec.malicious_model.params)
            save_triggers(out / "triggers", rec.eval_triggers,
                          kind="bim" if isinstance(self.adversary, MaskedInjectionAdversary) else "cross",
                          source_label=self.config.backdoor.source_label)
            if len(rec.eval_triggers) >= 2:
                ssd = metrics.trigger_ssd(rec.eval_triggers)
                (out / "trigger_ssd.txt").write_text(
                    "".join(f"{v:.9g}\n" for v in ssd))
            for name, mask in rec.masks.items():
                checkpoint.save_mask(out / f"{name}.mask", mask.bits, rec.base_model.params.layout)
        checkpoint.save_params(out / "final.fsbd", self.state.model.params)
        window = getattr(self.adversary, "window", None)
        if window is not None and len(window):
            np.save(out / "window_snapshots.npy", np.stack(window.snapshots))
            np.save(out / "window_rounds.npy", np.array(window.round_ids))
        if self.post_snapshots:
            np.save(out / "post_injection_snapshots.npy", np.stack(self.post_snapshots))
        provenance = {
            "config_hash": config_hash(self.config),
            "config": repr(self.config),
            "seed": self.config.seed,
            "threads": self.threads,
            "injection_round": rec.round if rec is not None else None,
            "rounds_completed": self.state.round,
            "duration_sec": round(time.time() - started, 3),
            "status": "failed" if failure is not None else "ok",
            "versions": {"fsbd": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
        }
        with open(out / "run.json", "w") as f:
            json.dump(provenance, f, indent=2, sort_keys=True)
            f.write("\n")

    # ------------------------------------------------------------- prefix

    def run_to_injection(self) -> InjectionPointReached:
        """Run rounds until the adversary would inject; returns the branch point.

        The runner's state is left at the injection round's broadcast model
        (that round not yet aggregated).
        """
        if self.adversary is None or not isinstance(self.adversary, MaskedInjectionAdversary):
            raise InputError("prefix runs require a perdoor or adversarial-only attack mode")
        self.adversary.dry_run = True
        cfg = self.config.rounds
        try:
            fl.run_rounds(self.state, cfg, self.train, self.partition,
                          aggregator=self.aggregator, adversary=self.adversary,
                          metric_hooks=(), threads=self.threads)
        except fl.RoundFailure as e:
            cause = e.__cause__
            if isinstance(cause, InjectionPointReached):
                self.adversary.dry_run = False
                return cause
            raise
        raise InputError(f"adversary was never ready to inject within {cfg.rounds} rounds "
                         f"(selected {len(self.adversary.window)} times)")


def save_triggers(path_prefix, triggers: attack.TriggerSet, kind: str, source_label: int) -> None:
    """Tensor blob (perturbed + source stacks) plus a JSON manifest."""
    checkpoint.save_tensors(str(path_prefix) + ".fsbd",
                            [triggers.images(), np.stack([e.source for e in triggers.entries])])
    manifest = {
        "kind": kind,
        "count": len(triggers),
        "epsilon": triggers.epsilon,
        "target_label": triggers.target_label,
        "source_label": source_label,
        "source_ids": triggers.source_indices(),
        "converged": [e.converged for e in triggers.entries],
    }
    with open(str(path_prefix) + ".json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_triggers(path_prefix) -> attack.TriggerSet:
    arrays = checkpoint.load_tensors(str(path_prefix) + ".fsbd")
    with open(str(path_prefix) + ".json") as f:
        manifest = json.load(f)
    x_hat, source = arrays
    entries = []
    for i in range(manifest["count"]):
        entries.append(attack.TriggerEntry(
            x_hat[i], x_hat[i] - source[i], source[i], manifest["target_label"],
            bool(manifest["converged"][i]), int(manifest["source_ids"][i])))
    return attack.TriggerSet(tuple(entries), manifest["target_label"], manifest["epsilon"])


# ------------------------------------------------------------------ sweeps


def _branch_state(point: InjectionPointReached, runner: ExperimentRunner):
    """Clone everything a sweep branch mutates: global state and defense state."""
    state = fl.GlobalState(point.ctx.global_model, point.ctx.round)
    if runner.defense_state is None:
        return state, runner.aggregator
    defense = copy.deepcopy(runner.defense_state)
    return state, (lambda model, updates, r: robust.foolsgold_aggregate(model, updates, defense))


def _aggregate_with_replacement(runner: ExperimentRunner, point: InjectionPointReached,
                                state: fl.GlobalState, aggregator, malicious: Optional[nn.Model]):
    """Finish the injection round: benign updates plus (optionally) the malicious message."""
    ctx = point.ctx
    cfg = runner.config.rounds
    selected = fl.select_participants(cfg, ctx.round)
    updates = []
    for p in selected:
        rng = derive_rng(cfg.seed, "local", ctx.round, int(p))
        updates.append(fl.local_train(state.model, runner.train.subset(runner.partition[int(p)]),
                                      cfg, int(p), rng))
    if malicious is not None:
        wire = malicious_wire_message(runner.config, ctx, malicious)
        updates = [wire if u.participant_id == ctx.participant_id else u for u in updates]
    state.model = aggregator(state.model, updates, ctx.round)
    state.round += 1


def sweep_t_delta(config: ExperimentConfig, values, threads: int = 1,
                  prefix: Optional[tuple] = None) -> list[dict]:
    """Backdoor-capacity curve: masked-parameter counts per variance threshold."""
    runner, point = prefix or _sweep_prefix(config, threads)
    sigma_mask = attack.low_importance_mask(point.ctx.global_model, point.ctx.shard)
    rows = []
    for value in values:
        stable = attack.stability_mask(point.window, value, config.backdoor.variance_ddof)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mask = attack.backdoor_mask(stable, sigma_mask)
        rows.append({"t_delta": value, "stable_count": stable.count(),
                     "backdoor_count": mask.count()})
    return rows


def _sweep_prefix(config: ExperimentConfig, threads: int = 1):
    runner = ExperimentRunner(config, threads)
    point = runner.run_to_injection()
    return runner, point


def sweep_delta(config: ExperimentConfig, values, threads: int = 1,
                prefix: Optional[tuple] = None) -> list[dict]:
    """Stealthiness curve: CKA(malicious, global) and post-injection clean accuracy per delta.

    Includes a delta=0 row: the no-attack aggregation of the same round, for
    the accuracy-drop comparison.
    """
    runner, point = prefix or _sweep_prefix(config, threads)
    probe = runner.test.subset(np.arange(min(config.cka_probe, len(runner.test))))
    rows = []
    state, aggregator = _branch_state(point, runner)
    _aggregate_with_replacement(runner, point, state, aggregator, malicious=None)
    rows.append({"delta": 0.0, "cka": 1.0, "acc_main": metrics.acc_main(state.model, runner.eval_test)})
    for value in values:
        cfg_v = replace(config, backdoor=replace(config.backdoor, delta=value))
        record = build_injection(cfg_v, point.ctx, point.window, runner.test)
        cka = metrics.linear_cka(record.malicious_model, point.ctx.global_model, probe)
        state, aggregator = _branch_state(point, runner)
        _aggregate_with_replacement(runner, point, state, aggregator, record.malicious_model)
        rows.append({"delta": value, "cka": cka,
                     "acc_main": metrics.acc_main(state.model, runner.eval_test)})
    return rows


def sweep_epsilon(config: ExperimentConfig, values, post_rounds: int = 50,
                  threads: int = 1, prefix: Optional[tuple] = None) -> list[dict]:
    """Persistence-vs-strength curve: post-injection backdoor accuracy per epsilon."""
    runner, point = prefix or _sweep_prefix(config, threads)
    rows = []
    for value in values:
        cfg_v = replace(config, backdoor=replace(config.backdoor, epsilon=value, alpha=None))
        record = build_injection(cfg_v, point.ctx, point.window, runner.test)
        state, aggregator = _branch_state(point, runner)
        _aggregate_with_replacement(runner, point, state, aggregator, record.malicious_model)
        accs = [metrics.acc_backdoor(state.model, record.eval_triggers)]

        def track(round_no, model, active, _accs=accs, _trig=record.eval_triggers):
            _accs.append(metrics.acc_backdoor(model, _trig))
            return {}

        post_cfg = replace(cfg_v.rounds, rounds=post_rounds)
        fl.run_rounds(state, post_cfg, runner.train, runner.partition,
                      aggregator=aggregator, adversary=None,
                      metric_hooks=(track,), threads=threads)
        arr = np.array(accs, dtype=float)
        rows.append({"epsilon": value, "mean_acc_backdoor": float(arr.mean()),
                     "final_acc_backdoor": float(arr[-1])})
    return rows


def evaluate_checkpoint(config: ExperimentConfig, checkpoint_path, triggers_prefix=None,
                        compare_checkpoint=None) -> dict:
    """Load a checkpoint and report clean / backdoor accuracy (and CKA vs a second one).

    Accuracy is measured on the same eval subset the run logged, so a
    checkpoint evaluates to exactly the value recorded at its save round.
    """
    _, test = build_datasets(config.dataset)
    topology = nn.small_cnn(test.input_shape, test.classes)
    params = checkpoint.load_params(checkpoint_path, topology.make_layout())
    model = nn.Model(topology, params)
    limit = config.eval_limit or len(test)
    eval_test = test.subset(np.arange(min(limit, len(test))))
    out = {"acc_main": metrics.acc_main(model, eval_test)}
    if triggers_prefix is not None:
        triggers = load_triggers(triggers_prefix)
        out["acc_backdoor"] = metrics.acc_backdoor(model, triggers)
    if compare_checkpoint is not None:
        other = nn.Model(topology, checkpoint.load_params(compare_checkpoint, topology.make_layout()))
        probe = test.subset(np.arange(min(config.cka_probe, len(test))))
        out["cka"] = metrics.linear_cka(model, other, probe)
    return out
