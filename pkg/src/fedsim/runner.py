"""Experiment orchestration: the federated round loop, metrics, summaries.

Each round: sample a cohort without replacement, dispatch the (possibly
pruned) global state, run the cohort's local training (parallelizable,
deterministic via named streams), record exact message bytes both ways,
aggregate, and periodically append a RoundRecord to the metrics CSV.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, clients, comms, gates, metrics, server
from .config import ExperimentConfig, config_echo, override_value
from .data import (load_idx, partition_dirichlet, partition_single_class,
                   split_train_test, synth_classification)
from .errors import ConfigError
from .nn import (GroupedParams, ModelSpec, group_norms, init_params,
                 layout_for, submodel_indices)
from .optim import OptimizerState
from .rng import stream

DENSE_STRATEGIES = ("fedavg", "fedprox", "laplace", "median", "mog")


def resolve_jobs(cfg: ExperimentConfig, cli_jobs=None) -> int:
    """Priority: FEDSIM_JOBS env var, then --jobs, then the config value."""
    env = os.environ.get("FEDSIM_JOBS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"FEDSIM_JOBS={env!r} is not an integer") from exc
    if cli_jobs is not None:
        return max(1, int(cli_jobs))
    return cfg.jobs


def build_dataset(cfg: ExperimentConfig):
    if cfg.data.source == "idx":
        return load_idx(cfg.data.images_path, cfg.data.labels_path)
    seed = cfg.data.seed if cfg.data.seed >= 0 else cfg.master_seed
    return synth_classification(seed, cfg.data.n_per_class, cfg.data.input_dim,
                                cfg.data.num_classes, cfg.data.class_separation)


def build_shards(cfg: ExperimentConfig, dataset):
    if cfg.partition.scheme == "dirichlet":
        shards = partition_dirichlet(dataset, cfg.partition.num_shards,
                                     cfg.partition.alpha, cfg.master_seed)
    else:
        shards = partition_single_class(dataset, cfg.partition.num_shards)
    return [split_train_test(s, cfg.partition.test_fraction, cfg.master_seed)
            for s in shards]


def build_model_spec(cfg: ExperimentConfig, dataset) -> ModelSpec:
    return ModelSpec(
        kind=cfg.model.kind,
        input_dim=dataset.inputs.shape[1],
        num_classes=dataset.num_classes,
        hidden_dim=cfg.model.hidden_dim if cfg.model.kind == "mlp" else 0,
        grouping=cfg.model.grouping,
        gate_output=cfg.model.gate_output,
    )


def build_server_state(cfg: ExperimentConfig, spec: ModelSpec) -> server.ServerState:
    w = init_params(spec, stream(cfg.master_seed, 0, 0, "init"),
                    scale=cfg.model.init_scale)
    state = server.ServerState(w=w, strategy=cfg.strategy,
                               temperature=cfg.server.temperature,
                               prune_epsilon=cfg.server.prune_epsilon,
                               mog_lambda=cfg.server.mog_lambda)
    if cfg.strategy in ("fedavg", "fedprox", "laplace", "fedl1"):
        state.opt_w = OptimizerState(cfg.server.optimizer, lr=cfg.server.lr)
    if cfg.strategy == "fedsparse":
        state.opt_w = OptimizerState(cfg.server.optimizer, lr=cfg.server.lr)
        state.opt_v = OptimizerState(cfg.server.v_optimizer,
                                     lr=cfg.server.lr_thresholds)
        state.v = gates.init_v_for_target(
            group_norms(w), cfg.server.theta0,
            cfg.server.temperature).astype(np.float32)
    if cfg.strategy == "mog":
        state.ensemble = [
            init_params(spec, stream(cfg.master_seed, 0, k, "mog_init"),
                        scale=cfg.model.init_scale).flat
            for k in range(cfg.server.mog_components)
        ]
    return state


def _wire_sizes(lay):
    """Transmission-group sizes: gated groups plus one trailing block for the
    ungrouped coordinates (always transmitted, bit always set)."""
    sizes = list(lay.group_sizes)
    if lay.ungrouped.size:
        sizes.append(lay.ungrouped.size)
    return np.asarray(sizes, dtype=np.int64)


def _wire_mask(lay, keep):
    bits = list(np.asarray(keep, dtype=bool))
    if lay.ungrouped.size:
        bits.append(True)
    return np.asarray(bits, dtype=bool)


def _wire_weights(lay, flat, keep):
    parts = [flat[lay.groups[g].indices] for g in np.flatnonzero(keep)]
    if lay.ungrouped.size:
        parts.append(flat[lay.ungrouped])
    if parts:
        return np.concatenate(parts).astype(np.float32)
    return np.empty(0, np.float32)


def _wire_v(lay, v):
    if lay.ungrouped.size:
        return np.concatenate([np.asarray(v, np.float32), [np.float32(0.0)]])
    return np.asarray(v, np.float32)


class ExperimentRunner:
    def __init__(self, cfg: ExperimentConfig, out_dir, seed=None, jobs=None,
                 render_figures=True):
        self.cfg = dataclasses.replace(cfg)
        if seed is not None:
            self.cfg.master_seed = int(seed)
        # one temperature governs both sides of the gate parameterization
        self.cfg.client = dataclasses.replace(
            cfg.client, temperature=cfg.server.temperature)
        self.jobs = resolve_jobs(self.cfg, jobs)
        self.out_dir = Path(out_dir)
        self.render = render_figures

        self.dataset = build_dataset(self.cfg)
        self.shards = build_shards(self.cfg, self.dataset)
        self.spec = build_model_spec(self.cfg, self.dataset)
        self.layout = layout_for(self.spec)
        self.state = build_server_state(self.cfg, self.spec)
        self.ledger = comms.CostLedger()
        self.snapshots = [self.state.w.flat.copy() for _ in self.shards]
        self.records: list[metrics.RoundRecord] = []
        self.steps_total = 0
        self.test_x = np.concatenate([s.test_x for s in self.shards])
        self.test_y = np.concatenate([s.test_y for s in self.shards])
        self.strategy_tag = comms.STRATEGY_TAGS[self.cfg.strategy]
        self._last_pis = []

    # ------------------------------------------------------------ dispatch
    def _header(self, round_idx, client_id, kind):
        return comms.Header(round_idx, int(client_id), self.strategy_tag, kind)

    def _dispatch(self, round_idx, cohort):
        """Encode and account one download message per sampled client.

        Returns per-client payload context consumed by the local step.
        """
        cfg, state, lay = self.cfg, self.state, self.layout
        jobs = []
        if cfg.strategy in DENSE_STRATEGIES:
            for pos, sid in enumerate(cohort):
                if cfg.strategy == "mog":
                    k = int(sid) % len(state.ensemble)
                    flat = state.ensemble[k]
                else:
                    flat = state.w.flat
                msg = comms.encode_dense(
                    self._header(round_idx, sid, comms.KIND_DENSE), flat)
                self.ledger.record_dispatch(round_idx, int(sid), msg)
                jobs.append((sid, {"flat": flat.copy()}))
        elif cfg.strategy == "fedsparse":
            state.apply_prune()
            keep = state.prune_mask()
            wire_w = _wire_weights(lay, state.w.flat, keep)
            wire_v = _wire_v(lay, state.v)
            for sid in cohort:
                msg = comms.encode_sparse_update(
                    self._header(round_idx, sid, comms.KIND_SPARSE),
                    _wire_mask(lay, keep), wire_w, _wire_sizes(lay), v=wire_v)
                self.ledger.record_dispatch(round_idx, int(sid), msg)
                jobs.append((sid, {"flat": state.w.flat.copy(),
                                   "v": state.v.copy()}))
        elif cfg.strategy == "fedl1":
            keep = group_norms(state.w) > cfg.client.l1_strength
            masked = state.w.flat * lay.expand_mask(
                keep.astype(np.float64)).astype(np.float32)
            wire_w = _wire_weights(lay, masked, keep)
            for sid in cohort:
                msg = comms.encode_sparse_update(
                    self._header(round_idx, sid, comms.KIND_SPARSE),
                    _wire_mask(lay, keep), wire_w, _wire_sizes(lay))
                self.ledger.record_dispatch(round_idx, int(sid), msg)
                jobs.append((sid, {"flat": masked.copy()}))
        elif cfg.strategy == "feddrop":
            drop_rng = stream(cfg.master_seed, round_idx, 0, "feddrop")
            disp = server.feddrop_dispatch(state.w, cfg.client.drop_rate,
                                           drop_rng, [int(s) for s in cohort])
            for sid in cohort:
                mask, sub = disp[int(sid)]
                msg = comms.encode_submodel(
                    self._header(round_idx, sid, comms.KIND_SUBMODEL), mask, sub)
                self.ledger.record_dispatch(round_idx, int(sid), msg)
                jobs.append((sid, {"mask": mask, "sub": sub}))
        else:
            raise ConfigError(f"unknown strategy {cfg.strategy}")
        return jobs

    # ------------------------------------------------------------- clients
    def _run_client(self, round_idx, sid, payload):
        cfg = self.cfg
        sid = int(sid)
        shard = self.shards[sid]
        shuffle = stream(cfg.master_seed, round_idx, sid, "shuffle")
        context = f"round {round_idx} client {sid}"
        strat = cfg.strategy
        if strat in ("fedavg", "median", "mog"):
            w = GroupedParams(self.spec, payload["flat"])
            return clients.client_fedavg(w, shard, cfg.client, shuffle,
                                         client_id=sid, context=context)
        if strat == "fedprox":
            w = GroupedParams(self.spec, payload["flat"])
            return clients.client_fedprox(w, shard, cfg.client, shuffle,
                                          client_id=sid, context=context)
        if strat == "laplace":
            w = GroupedParams(self.spec, payload["flat"])
            return clients.client_laplace(w, shard, cfg.client, shuffle,
                                          client_id=sid, context=context)
        if strat == "fedl1":
            w = GroupedParams(self.spec, payload["flat"])
            return clients.client_fedl1(w, shard, cfg.client, shuffle,
                                        client_id=sid, context=context)
        if strat == "fedsparse":
            w = GroupedParams(self.spec, payload["flat"])
            gate = stream(cfg.master_seed, round_idx, sid, "gates")
            return clients.client_fedsparse(w, payload["v"], shard, cfg.client,
                                            shuffle, gate, client_id=sid,
                                            context=context)
        if strat == "feddrop":
            mask = payload["mask"]
            sub_spec = ModelSpec(kind="mlp", input_dim=self.spec.input_dim,
                                 num_classes=self.spec.num_classes,
                                 hidden_dim=int(mask.sum()))
            sub = GroupedParams(sub_spec, payload["sub"].copy())
            return clients.client_feddrop(sub, mask, shard, cfg.client, shuffle,
                                          client_id=sid, context=context)
        raise ConfigError(f"unknown strategy {strat}")

    # -------------------------------------------------------------- upload
    def _record_upload(self, round_idx, upd: clients.ClientUpdate):
        lay = self.layout
        if upd.tag == "dense":
            msg = comms.encode_dense(
                self._header(round_idx, upd.client_id, comms.KIND_DENSE),
                upd.params)
        elif upd.tag == "sparse":
            wire_v = None if upd.v is None else _wire_v(lay, upd.v)
            msg = comms.encode_sparse_update(
                self._header(round_idx, upd.client_id, comms.KIND_SPARSE),
                _wire_mask(lay, upd.bitmask),
                _wire_weights(lay, upd.weights_masked, upd.bitmask),
                _wire_sizes(lay), v=wire_v)
        else:
            msg = comms.encode_submodel(
                self._header(round_idx, upd.client_id, comms.KIND_SUBMODEL),
                upd.unit_mask, upd.sub_params)
        self.ledger.record_upload(round_idx, upd.client_id, msg)

    # ----------------------------------------------------------- aggregate
    def _aggregate(self, round_idx, updates):
        cfg, state = self.cfg, self.state
        context = f"round {round_idx} server"
        strat = cfg.strategy
        if strat in ("fedavg", "fedprox"):
            state.w.flat = server.server_step_difference(
                state.w.flat, [u.params for u in updates], state.opt_w, context)
        elif strat in ("laplace", "median"):
            state.w.flat = server.aggregate_median([u.params for u in updates])
        elif strat == "mog":
            state.ensemble = server.mog_update(
                state.ensemble, [u.params for u in updates], state.mog_lambda)
        elif strat == "fedl1":
            state.w.flat = server.server_step_difference(
                state.w.flat, [u.weights_masked for u in updates], state.opt_w,
                context)
        elif strat == "fedsparse":
            server.fedsparse_server_round(state, updates, context)
        elif strat == "feddrop":
            state.w.flat = server.feddrop_merge(state.w, updates)

    def _update_snapshot(self, upd: clients.ClientUpdate):
        if upd.tag == "dense":
            self.snapshots[upd.client_id] = upd.params.copy()
        elif upd.tag == "sparse":
            self.snapshots[upd.client_id] = upd.weights_masked.copy()
        else:
            snap = np.zeros(self.layout.n_params, np.float32)
            snap[submodel_indices(self.layout, upd.unit_mask)] = upd.sub_params
            self.snapshots[upd.client_id] = snap

    # ------------------------------------------------------------- metrics
    def _evaluate(self, round_idx) -> metrics.RoundRecord:
        cfg, state = self.cfg, self.state
        if cfg.strategy == "mog":
            global_acc = metrics.ensemble_accuracy(
                [GroupedParams(self.spec, f) for f in state.ensemble],
                self.test_x, self.test_y)
        else:
            global_acc = metrics.global_accuracy(state.w, self.test_x,
                                                 self.test_y)
        local_acc = metrics.local_accuracy(self.snapshots, self.spec,
                                           self.shards)
        sparsity = 0.0
        tv_avg = tv_max = 0.0
        if cfg.strategy == "fedsparse":
            sparsity = metrics.sparsity_ratio(state.theta(),
                                              state.prune_epsilon,
                                              self.layout.group_sizes)
            if self._last_pis:
                tv_avg, tv_max = metrics.tv_alignment(self._last_pis,
                                                      state.theta())
        elif cfg.strategy == "fedl1":
            keep = group_norms(state.w) > cfg.client.l1_strength
            sparsity = metrics.sparsity_from_mask(keep, self.layout.group_sizes)
        return metrics.RoundRecord(
            round_idx=round_idx,
            global_acc=global_acc,
            local_acc_mean=local_acc,
            sparsity_pct=sparsity,
            tv_avg=tv_avg,
            tv_max=tv_max,
            bytes_up_cum=self.ledger.bytes_up_total,
            bytes_down_cum=self.ledger.bytes_down_total,
            wall_ms=self.steps_total,
        )

    # ----------------------------------------------------------------- run
    def run(self) -> dict:
        cfg = self.cfg
        self.out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.out_dir / "metrics.csv"
        started = time.time()
        with open(csv_path, "w") as csv_file:
            csv_file.write(metrics.CSV_HEADER + "\n")
            csv_file.flush()
            for round_idx in range(1, cfg.rounds + 1):
                sampler = stream(cfg.master_seed, round_idx, 0, "sampling")
                cohort = sampler.choice(cfg.partition.num_shards,
                                        size=cfg.cohort, replace=False)
                jobs = self._dispatch(round_idx, cohort)
                if self.jobs > 1:
                    with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                        updates = list(pool.map(
                            lambda job: self._run_client(round_idx, *job),
                            jobs))
                else:
                    updates = [self._run_client(round_idx, sid, payload)
                               for sid, payload in jobs]
                for upd in updates:
                    self._record_upload(round_idx, upd)
                    self._update_snapshot(upd)
                    self.steps_total += upd.n_steps
                if cfg.strategy == "fedsparse":
                    self._last_pis = [u.pi for u in updates]
                self._aggregate(round_idx, updates)
                if round_idx % cfg.eval_interval == 0 or round_idx == cfg.rounds:
                    record = self._evaluate(round_idx)
                    self.records.append(record)
                    csv_file.write(record.csv_row() + "\n")
                    csv_file.flush()
        summary = self._write_summary(csv_path, time.time() - started)
        if self.render:
            from .figures import render_figures
            render_figures(self.records, self.out_dir,
                           title=cfg.name or cfg.strategy)
        return summary

    def _write_summary(self, csv_path, runtime_s) -> dict:
        final = self.records[-1] if self.records else None
        summary = {
            "version": f"fedsim {__version__}",
            "config": config_echo(self.cfg),
            "metrics_csv": str(csv_path),
            "final": dataclasses.asdict(final) if final else None,
            "bytes_up_total": self.ledger.bytes_up_total,
            "bytes_down_total": self.ledger.bytes_down_total,
            "client_steps_total": self.steps_total,
            "runtime_seconds": round(runtime_s, 3),
        }
        with open(self.out_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        return summary


def run_experiment(cfg: ExperimentConfig, out_dir, seed=None, jobs=None,
                   render_figures=True) -> dict:
    return ExperimentRunner(cfg, out_dir, seed=seed, jobs=jobs,
                            render_figures=render_figures).run()


def run_sweep(cfg: ExperimentConfig, param: str, values, out_root, seed=None,
              jobs=None, render_figures=False) -> list[dict]:
    """Run one experiment per value of a dotted config key."""
    out_root = Path(out_root)
    summaries = []
    leaf = param.split(".")[-1]
    for value in values:
        variant = dataclasses.replace(cfg)
        variant.data = dataclasses.replace(cfg.data)
        variant.partition = dataclasses.replace(cfg.partition)
        variant.model = dataclasses.replace(cfg.model)
        variant.client = dataclasses.replace(cfg.client)
        variant.server = dataclasses.replace(cfg.server)
        override_value(variant, param, value)
        out_dir = out_root / f"{leaf}={value}"
        summaries.append(run_experiment(variant, out_dir, seed=seed, jobs=jobs,
                                        render_figures=render_figures))
    return summaries
