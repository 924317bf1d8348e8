"""Plotly figures for training curves and dataset composition."""
import logging

import plotly.graph_objects as go
from plotly.subplots import make_subplots

from utils import atomic_write

logger = logging.getLogger(__name__)

COLORS = {
    'primary': '#1f77b4',
    'secondary': '#2ecc71',
    'warning': '#f1c40f',
    'danger': '#e74c3c',
    'dark': '#2c3e50',
    'grid': '#ecf0f1',
}

BUCKET_COLORS = {
    'easy': '#2ca02c',
    'medium': '#ff7f0e',
    'hard': '#d62728',
    'unbucketed': '#95a5a6',
}


def apply_plot_style(fig):
    """Apply consistent styling to plotly figures"""
    fig.update_layout(
        paper_bgcolor='rgba(0,0,0,0)',
        plot_bgcolor='rgba(0,0,0,0)',
        font={'family': 'sans-serif'},
        title_font_size=20,
        title_font_color=COLORS['dark'],
        legend_font_size=10,
        margin=dict(t=50, l=50, r=20, b=50),
    )
    fig.update_xaxes(gridcolor=COLORS['grid'], zeroline=False)
    fig.update_yaxes(gridcolor=COLORS['grid'], zeroline=False)
    return fig


def training_curve_figure(log, title="GRPO training dynamics"):
    """Mean reward and policy entropy against step, one panel each"""
    fig = make_subplots(rows=2, cols=1, shared_xaxes=True,
                        subplot_titles=("Mean reward", "Policy entropy"))
    fig.add_trace(go.Scatter(x=log['step'], y=log['mean_reward'], mode='lines',
                             name='mean reward', line=dict(color=COLORS['primary'])), row=1, col=1)
    fig.add_trace(go.Scatter(x=log['step'], y=log['policy_entropy'], mode='lines',
                             name='policy entropy', line=dict(color=COLORS['danger'])), row=2, col=1)
    fig.update_layout(title=title, height=600)
    fig.update_xaxes(title_text="Step", row=2, col=1)
    return apply_plot_style(fig)


def dataset_stats_figure(summary, title="Dataset composition"):
    """Source and bucket composition plus aspect-ratio and pixel-count histograms from `pipeline.stats`"""
    fig = make_subplots(rows=2, cols=2, subplot_titles=("Sources", "Difficulty buckets",
                                                        "Aspect ratio (W/H)", "Total pixels"))
    sources = summary['source']
    fig.add_trace(go.Bar(x=list(sources), y=list(sources.values()),
                         marker_color=COLORS['primary']), row=1, col=1)
    buckets = summary['bucket']
    fig.add_trace(go.Bar(x=list(buckets), y=list(buckets.values()),
                         marker_color=[BUCKET_COLORS.get(b, COLORS['dark']) for b in buckets]), row=1, col=2)
    fig.add_trace(go.Bar(x=list(summary['aspect_hist']), y=list(summary['aspect_hist'].values()),
                         marker_color=COLORS['secondary']), row=2, col=1)
    fig.add_trace(go.Bar(x=list(summary['pixel_hist']), y=list(summary['pixel_hist'].values()),
                         marker_color=COLORS['warning']), row=2, col=2)
    fig.update_layout(title=title, height=700, showlegend=False)
    return apply_plot_style(fig)


def write_figure(fig, path):
    with atomic_write(path) as handle:
        handle.write(fig.to_html(include_plotlyjs='cdn', full_html=True))
    logger.info(f"Wrote figure to {path}")
