# -*- coding: utf-8 -*-
"""
Settings Manager for the CFDG lab
Handles loading and saving of experiment settings as a flat `key = value` file
and builds the typed ExperimentConfig used by the experiment controller.
"""

import os
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

from cfdglib.augmentor import MixConfig
from cfdglib.diffusion import DiffusionSettings, NoiseSchedule
from cfdglib.envsuite import BehaviorTier, make_env, parse_mix
from cfdglib.lab_def import (ConfigError, FinetuneMode, LabIOError, Paradigm, parse_enum)
from cfdglib.rlcore import AgentConfig


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, validated."""
    experiment: str
    output_dir: str
    env: str
    seeds: Tuple[int, ...]
    mode: FinetuneMode
    dataset_size: int
    dataset_mix: Tuple[BehaviorTier, ...]
    offline_steps: int
    online_steps: int
    eval_every: int
    eval_episodes: int
    batch_size: int
    capacities: Dict[str, int]
    js_bins: int
    agent: AgentConfig = field(default_factory=AgentConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)

    @property
    def experiment_dir(self) -> str:
        return os.path.join(self.output_dir, self.experiment)

    def dataset_path(self, seed: int) -> str:
        return os.path.join(self.experiment_dir, 'data', str(seed), 'dataset.csv')

    def offline_dir(self, seed: int) -> str:
        return os.path.join(self.experiment_dir, 'offline', str(seed))

    def run_dir(self, mode: FinetuneMode, seed: int) -> str:
        return os.path.join(self.experiment_dir, FinetuneMode(mode).name.lower(), str(seed))


class SettingsManager:
    """Manages experiment settings stored in a flat key-value file."""

    DEFAULT_SETTINGS = {
        # experiment
        "experiment": "default",
        "output_dir": "out",
        "env": "PointMass-2D",
        "seeds": [0, 1, 2, 3, 4],
        "mode": "cfdg",
        "dataset_size": 5000,
        "dataset_mix": "medium:1.0",
        "offline_steps": 20000,
        "online_steps": 5000,
        "eval_every": 250,
        "eval_episodes": 10,
        "batch_size": 256,
        "js_bins": 20,
        # learner
        "gamma": 0.95,
        "tau_expectile": 0.7,
        "awr_beta": 3.0,
        "polyak_rho": 0.005,
        "lambda_cql_weight": 1.0,
        "lr_q": 3e-4,
        "lr_v": 3e-4,
        "lr_pi": 3e-4,
        "hidden_width": 64,
        "hidden_depth": 3,
        "n_policy_actions": 4,
        "cql_noise": 0.2,
        "explore_noise": 0.1,
        # data composition
        "paradigm": "concat5050",
        "r": 1.0 / 3.0,
        "syn_online_fraction": 0.8,
        "oorb_p": 0.5,
        "refresh_every": 500,
        "gen_count_per_refresh": 5000,
        "guidance_w": 1.0,
        "clear_synthetic_on_refresh": True,
        "diffusion_updates_per_refresh": 2000,
        "retrain_from_scratch": False,
        "chunk_size": 1000,
        "sample_workers": 1,
        "capacity_online": 100000,
        "capacity_offline": 100000,
        "capacity_syn_online": 100000,
        "capacity_syn_offline": 100000,
        # diffusion
        "denoiser_width": 256,
        "denoiser_depth": 4,
        "embed_dim": 16,
        "p_uncond": 0.1,
        "diffusion_lr": 3e-4,
        "diffusion_lr_min": 0.0,
        "diffusion_batch_size": 256,
        "n_sample_steps": 32,
        "sigma_min": 0.002,
        "sigma_max": 80.0,
        "sampler_rho": 7.0,
        "s_churn": 40.0,
        "s_tmin": 0.05,
        "s_tmax": 50.0,
        "s_noise": 1.003,
    }

    def __init__(self, settings_file: str = None):
        """
        Initialize settings manager.

        Args:
            settings_file: Path to the settings file. If None, only defaults are used.
        """
        self.settings_file = settings_file
        self.settings = dict(self.DEFAULT_SETTINGS)
        if settings_file is not None:
            self.load()

    def load(self) -> Dict[str, Any]:
        """
        Load settings from the file, on top of the defaults.

        Returns:
            Dictionary with loaded settings
        """
        try:
            with open(self.settings_file, 'r', encoding='utf-8') as f:
                lines = f.readlines()
        except OSError as e:
            raise LabIOError(f"cannot read config {self.settings_file}: {e}")

        loaded = {}
        for number, line in enumerate(lines, start=1):
            text = line.split('#', 1)[0].strip()
            if not text:
                continue
            if '=' not in text:
                raise ConfigError(f"line {number}", f"expected 'key = value', got '{text}'")
            key, value = (part.strip() for part in text.split('=', 1))
            loaded[key] = self._parse(key, value)
        self.settings = self._merge_settings(self.DEFAULT_SETTINGS, loaded)
        return self.settings

    def save(self, path: str = None) -> str:
        """
        Save current settings.

        Args:
            path: Target file; defaults to the file the settings were loaded from

        Returns:
            Path written
        """
        path = path or self.settings_file
        if path is None:
            raise LabIOError("no settings file given")
        try:
            settings_dir = os.path.dirname(path)
            if settings_dir:
                os.makedirs(settings_dir, exist_ok=True)
            with open(path, 'w', encoding='utf-8', newline='\n') as f:
                f.write(self.to_text())
        except OSError as e:
            raise LabIOError(f"cannot write config {path}: {e}")
        return path

    def to_text(self) -> str:
        lines = ["# CFDG lab experiment settings"]
        for key in self.DEFAULT_SETTINGS:
            lines.append(f"{key} = {self._format(self.settings[key])}")
        return '\n'.join(lines) + '\n'

    def get(self, key: str, default: Any = None) -> Any:
        return self.settings.get(key, default)

    def set(self, key: str, value: Any):
        """
        Set a setting. String values are parsed with the key's type.
        """
        if key not in self.DEFAULT_SETTINGS:
            raise ConfigError(key, "unknown key")
        if isinstance(value, str):
            value = self._parse(key, value)
        self.settings[key] = value

    def reset_to_defaults(self):
        self.settings = dict(self.DEFAULT_SETTINGS)

    def _merge_settings(self, default: Dict, loaded: Dict) -> Dict:
        result = dict(default)
        result.update(loaded)
        return result

    def _parse(self, key: str, value: str) -> Any:
        if key not in self.DEFAULT_SETTINGS:
            raise ConfigError(key, "unknown key")
        default = self.DEFAULT_SETTINGS[key]
        try:
            if isinstance(default, bool):
                token = value.lower()
                if token in ('true', 'yes', '1'):
                    return True
                if token in ('false', 'no', '0'):
                    return False
                raise ValueError(value)
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
            if isinstance(default, list):
                return [int(v) for v in value.split(',') if v.strip()]
        except ValueError:
            raise ConfigError(key, f"malformed value '{value}'")
        return value

    @staticmethod
    def _format(value: Any) -> str:
        if isinstance(value, bool):
            return 'true' if value else 'false'
        if isinstance(value, float):
            return repr(value)
        if isinstance(value, list):
            return ','.join(str(v) for v in value)
        return str(value)

    def experiment_config(self) -> ExperimentConfig:
        """
        Build and validate the typed experiment configuration.

        Raises:
            ConfigError: A value is out of range; the message names the key
        """
        s = self.settings
        make_env(s['env'])
        if not s['seeds']:
            raise ConfigError('seeds', "at least one seed is required")
        mix_tiers = parse_mix(s['dataset_mix'])
        if not mix_tiers or abs(sum(t.fraction for t in mix_tiers) - 1.0) > 1e-9:
            raise ConfigError('dataset_mix', f"tier fractions must sum to 1, got '{s['dataset_mix']}'")
        for key in ('dataset_size', 'offline_steps', 'online_steps', 'eval_every', 'eval_episodes', 'js_bins'):
            if s[key] < 1:
                raise ConfigError(key, f"must be >= 1, got {s[key]}")
        if s['batch_size'] < 3:
            raise ConfigError('batch_size', f"must be >= 3, got {s['batch_size']}")

        agent = AgentConfig(
            gamma=s['gamma'], tau_expectile=s['tau_expectile'], awr_beta=s['awr_beta'],
            polyak_rho=s['polyak_rho'], lambda_cql_weight=s['lambda_cql_weight'],
            lr_q=s['lr_q'], lr_v=s['lr_v'], lr_pi=s['lr_pi'],
            hidden_width=s['hidden_width'], hidden_depth=s['hidden_depth'],
            n_policy_actions=s['n_policy_actions'], cql_noise=s['cql_noise'], explore_noise=s['explore_noise'])
        mix = MixConfig(
            r=s['r'], syn_online_fraction=s['syn_online_fraction'], oorb_p=s['oorb_p'],
            refresh_every=s['refresh_every'], gen_count_per_refresh=s['gen_count_per_refresh'],
            paradigm=parse_enum(Paradigm, 'paradigm', s['paradigm']), guidance_w=s['guidance_w'],
            clear_synthetic_on_refresh=s['clear_synthetic_on_refresh'],
            diffusion_updates_per_refresh=s['diffusion_updates_per_refresh'],
            retrain_from_scratch=s['retrain_from_scratch'], chunk_size=s['chunk_size'],
            sample_workers=s['sample_workers'])
        schedule = NoiseSchedule(
            sigma_min=s['sigma_min'], sigma_max=s['sigma_max'], n_steps=s['n_sample_steps'], rho=s['sampler_rho'],
            s_churn=s['s_churn'], s_tmin=s['s_tmin'], s_tmax=s['s_tmax'], s_noise=s['s_noise'])
        diffusion = DiffusionSettings(
            width=s['denoiser_width'], depth=s['denoiser_depth'], embed_dim=s['embed_dim'],
            p_uncond=s['p_uncond'], lr=s['diffusion_lr'], lr_min=s['diffusion_lr_min'],
            batch_size=s['diffusion_batch_size'], schedule=schedule)
        capacities = {name: s[f'capacity_{name}'] for name in ('online', 'offline', 'syn_online', 'syn_offline')}
        for name, cap in capacities.items():
            if cap < 1:
                raise ConfigError(f'capacity_{name}', f"must be >= 1, got {cap}")

        return ExperimentConfig(
            experiment=s['experiment'], output_dir=s['output_dir'], env=s['env'], seeds=tuple(s['seeds']),
            mode=FinetuneMode.from_name(s['mode']), dataset_size=s['dataset_size'],
            dataset_mix=tuple(mix_tiers), offline_steps=s['offline_steps'], online_steps=s['online_steps'],
            eval_every=s['eval_every'], eval_episodes=s['eval_episodes'], batch_size=s['batch_size'],
            capacities=capacities, js_bins=s['js_bins'], agent=agent, mix=mix, diffusion=diffusion)


def load_experiment_config(path: str) -> ExperimentConfig:
    return SettingsManager(path).experiment_config()
