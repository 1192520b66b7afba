# -*- coding: utf-8 -*-
"""
Experiment controller for the CFDG lab.
Runs the pipeline stages (dataset generation, offline pre-training, online
fine-tuning, reporting) and lays their outputs out under
<output_dir>/<experiment>/.
"""

import json
import logging
import os
from typing import Dict, Iterable, List, Optional

from cfdglib.augmentor import (BufferSet, CfdgModel, PhaseSettings, derive_rng, mode_to_mix, pretrain_offline,
                               run_online_phase)
from cfdglib.diagnostics import (CurveSeries, aggregate_curves, divergence_report, read_curve_csv,
                                 read_divergence_csv, summarize, write_curve_csv, write_divergence_csv, write_table)
from cfdglib.diffusion import fit_codec
from cfdglib.envsuite import build_offline_dataset, make_env, read_dataset, reference_returns, write_dataset
from cfdglib.lab_def import FinetuneMode, LabIOError
from cfdglib.numkernel import load_networks, save_networks
from cfdglib.rlcore import Agent, AgentParams, init_agent
from settings_manager import ExperimentConfig

REPORT_HEADER = ['step', 'mode', 'mean', 'std', 'n_seeds']
FINAL_SCORES_HEADER = ['mode', 'mean', 'std', 'n_seeds']
DIVERGENCE_REPORT_HEADER = ['quantity', 'pair', 'mode', 'mean', 'std', 'n_seeds']


class ExperimentController:
    """
    Drives one experiment configuration through the pipeline stages.
    Every stage is deterministic given the configuration and seed.
    """

    def __init__(self, config: ExperimentConfig):
        """
        Initialize the controller.

        Args:
            config: Validated experiment configuration
        """
        self.config = config
        self.spec = make_env(config.env)
        self.logger = logging.getLogger('CFDGLab.controller')

    def _seeds(self, seed: Optional[int]) -> Iterable[int]:
        return self.config.seeds if seed is None else (seed,)

    def _phase(self, total_steps: int) -> PhaseSettings:
        c = self.config
        return PhaseSettings(total_steps, c.batch_size, c.eval_every, c.eval_episodes)

    def cmd_gen_data(self, seed: Optional[int] = None) -> List[str]:
        """
        Generate the offline dataset for each seed.

        Returns:
            Paths of the written dataset files
        """
        written = []
        for s in self._seeds(seed):
            dataset = build_offline_dataset(self.spec, self.config.dataset_mix, self.config.dataset_size, s)
            path = self.config.dataset_path(s)
            write_dataset(path, dataset)
            self.logger.info(f"Dataset for seed {s} written to {path}")
            written.append(path)
        return written

    def cmd_train_offline(self, seed: Optional[int] = None) -> List[str]:
        """
        Pre-train an agent on each seed's dataset.

        Returns:
            Paths of the written checkpoints
        """
        c = self.config
        refs = reference_returns(c.env)
        written = []
        for s in self._seeds(seed):
            dataset = read_dataset(c.dataset_path(s))
            agent = init_agent(self.spec.state_dim, self.spec.action_dim, c.agent, derive_rng(s, 'init'))
            self.logger.info(f"Offline pre-training seed {s}: {c.offline_steps} steps on {len(dataset)} transitions")
            agent, rows = pretrain_offline(agent, dataset.transitions, self.spec, c.agent,
                                           self._phase(c.offline_steps), s, refs)
            out_dir = c.offline_dir(s)
            save_networks(os.path.join(out_dir, 'agent.ckpt'), agent.params.networks())
            write_curve_csv(os.path.join(out_dir, 'curve.csv'), rows)
            written.append(os.path.join(out_dir, 'agent.ckpt'))
        return written

    def cmd_finetune(self, mode: Optional[FinetuneMode] = None, seed: Optional[int] = None) -> List[str]:
        """
        Fine-tune the offline agent online in the given mode.

        Args:
            mode: Fine-tuning mode; defaults to the configured one
            seed: Single seed to run; all configured seeds if None

        Returns:
            Run directories written
        """
        c = self.config
        mode = c.mode if mode is None else FinetuneMode(mode)
        mix = mode_to_mix(mode, c.mix)
        refs = reference_returns(c.env)
        written = []
        for s in self._seeds(seed):
            dataset = read_dataset(c.dataset_path(s))
            nets = load_networks(os.path.join(c.offline_dir(s), 'agent.ckpt'))
            agent = Agent.fresh(AgentParams.from_networks(nets))

            buffers = BufferSet.create(self.spec.state_dim, self.spec.action_dim, c.capacities['online'],
                                       c.capacities['offline'], c.capacities['syn_online'],
                                       c.capacities['syn_offline'])
            if len(dataset) > c.capacities['offline']:
                self.logger.warning(f"dataset has {len(dataset)} transitions, offline buffer keeps the newest "
                                    f"{c.capacities['offline']}")
            buffers.d_off.add_batch(dataset.transitions)

            codec = fit_codec(dataset.transitions)
            model = None
            if mix.refresh_enabled:
                model = CfdgModel.create(codec.width, c.diffusion, derive_rng(s, 'init', 1))

            self.logger.info(f"Fine-tuning seed {s} in mode {mode.name.lower()}: {c.online_steps} steps")
            agent, rows, model = run_online_phase(agent, buffers, model, self.spec, mix, c.agent,
                                                  self._phase(c.online_steps), s, codec if model is not None else None, refs)

            out_dir = c.run_dir(mode, s)
            save_networks(os.path.join(out_dir, 'agent.ckpt'), agent.params.networks())
            write_curve_csv(os.path.join(out_dir, 'curve.csv'), rows)
            if mode != FinetuneMode.BASELINE:
                entries = divergence_report(buffers, codec, c.js_bins, s)
                write_divergence_csv(os.path.join(out_dir, 'divergence.csv'), entries)
                self._save_model(out_dir, model, codec)
            written.append(out_dir)
        return written

    def _save_model(self, out_dir: str, model: CfdgModel, codec):
        path = os.path.join(out_dir, 'denoiser.ckpt')
        save_networks(path, model.denoiser.networks())
        try:
            with open(path + '.codec.json', 'w', encoding='utf-8', newline='\n') as f:
                json.dump(codec.to_dict(), f, indent=4)
        except OSError as e:
            raise LabIOError(f"cannot write codec statistics next to {path}: {e}")

    def cmd_report(self) -> List[str]:
        """
        Aggregate the completed fine-tuning runs of all modes.

        Writes report.csv (step,mode,mean,std,n_seeds over normalized score),
        final_scores.csv and divergence_report.csv into the experiment directory.

        Returns:
            Paths of the written files
        """
        c = self.config
        report_rows, final_rows, divergence_rows = [], [], []
        for mode in FinetuneMode:
            curves = []
            divergences: Dict[tuple, List[float]] = {}
            for s in c.seeds:
                run_dir = c.run_dir(mode, s)
                curve_path = os.path.join(run_dir, 'curve.csv')
                if not os.path.exists(curve_path):
                    continue
                curves.append(CurveSeries.from_rows(read_curve_csv(curve_path)))
                div_path = os.path.join(run_dir, 'divergence.csv')
                if os.path.exists(div_path):
                    for entry in read_divergence_csv(div_path):
                        divergences.setdefault((entry.quantity, entry.pair), []).append(entry.value)
            if not curves:
                continue
            name = mode.name.lower()
            agg = aggregate_curves(curves)
            for step, mean, std in zip(agg.steps, agg.mean, agg.std):
                report_rows.append([str(int(step)), name, repr(float(mean)), repr(float(std)), str(agg.n_runs)])
            final_mean, final_std = summarize([curve.values[-1] for curve in curves])
            final_rows.append([name, repr(final_mean), repr(final_std), str(len(curves))])
            for (quantity, pair), values in divergences.items():
                mean, std = summarize(values)
                divergence_rows.append([quantity, pair, name, repr(mean), repr(std), str(len(values))])
            self.logger.info(f"Mode {name}: {len(curves)} runs, final normalized score {final_mean:.1f} +- {final_std:.1f}")

        if not report_rows:
            raise LabIOError(f"no completed fine-tuning runs under {c.experiment_dir}")
        paths = [os.path.join(c.experiment_dir, name)
                 for name in ('report.csv', 'final_scores.csv', 'divergence_report.csv')]
        write_table(paths[0], REPORT_HEADER, report_rows)
        write_table(paths[1], FINAL_SCORES_HEADER, final_rows)
        write_table(paths[2], DIVERGENCE_REPORT_HEADER, divergence_rows)
        return paths
