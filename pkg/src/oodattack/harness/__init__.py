"""Campaign orchestration, persistence and plotting."""

from .campaign import Campaign, SweepReport, epsilon_sweep, metrics_from_records, noise_baseline, run_campaign, transfer_matrix
from .config import CampaignConfig, TaskSpec, fraction_text
from .render import render_example_grid, render_histograms, render_sweep
from .report import SCHEMA_VERSION, ReportBundle, ScoreRecord, TransferRow, read_report, write_report
from .sources import load_task, register_bundle, resolve_bundle, unregister_bundle

__all__ = [
    "Campaign", "CampaignConfig", "ReportBundle", "SCHEMA_VERSION", "ScoreRecord", "SweepReport", "TaskSpec",
    "TransferRow", "epsilon_sweep", "fraction_text", "load_task", "metrics_from_records", "noise_baseline",
    "read_report", "register_bundle", "render_example_grid", "render_histograms", "render_sweep", "resolve_bundle",
    "run_campaign", "transfer_matrix", "unregister_bundle", "write_report",
]
