"""SVG figure emission for densities, flux fields, trajectories, and
far-field decay curves.  2D projections only; axes configurable upstream."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import conservation as cons
from . import density_models as dm
from . import evaluation as ev


def _density_grid(model, t, bounds, n_grid=160, axes=(0, 1)):
    (x_lo, x_hi), (y_lo, y_hi) = bounds
    xs = np.linspace(x_lo, x_hi, n_grid)
    ys = np.linspace(y_lo, y_hi, n_grid)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.zeros((n_grid * n_grid, model.dim))
    pts[:, axes[0]] = gx.ravel()
    pts[:, axes[1]] = gy.ravel()
    ld = dm.log_density(model, t, pts).data.reshape(n_grid, n_grid)
    return xs, ys, np.exp(ld)


def default_bounds(model, rng=None, pad=0.3):
    rng = rng if rng is not None else np.random.default_rng(0)
    pts = np.concatenate([dm.sample(model, t, 256, rng) for t in (0.0, 0.5, 1.0)])
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    return (lo[0], hi[0]), (lo[1] if model.dim > 1 else -1.0,
                            hi[1] if model.dim > 1 else 1.0)


def plot_density(model, times, out_prefix, bounds=None, axes=(0, 1)):
    """One heatmap SVG per requested time; returns the paths written."""
    bounds = bounds if bounds is not None else default_bounds(model)
    paths = []
    for t in times:
        xs, ys, rho = _density_grid(model, t, bounds, axes=axes)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.pcolormesh(xs, ys, rho.T, shading="auto", cmap="viridis")
        ax.set_title(f"density at t={t:g}")
        ax.set_xlabel(f"x{axes[0] + 1}")
        ax.set_ylabel(f"x{axes[1] + 1}")
        path = f"{out_prefix}_t{t:g}.svg"
        fig.savefig(path, format="svg", bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths


def plot_flux_comparison(assembly, t, out_path, bounds=None, n_grid=20):
    """Side-by-side quiver of the raw -d/dt a term and the corrected flux,
    over a density contour."""
    model = assembly.model
    bounds = bounds if bounds is not None else default_bounds(model)
    (x_lo, x_hi), (y_lo, y_hi) = bounds
    xs = np.linspace(x_lo, x_hi, n_grid)
    ys = np.linspace(y_lo, y_hi, n_grid)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    neg_dta, b = cons.spurious_flux_components(model, t, pts)
    raw = neg_dta.data
    corrected = neg_dta.data + b.data
    _, _, rho = _density_grid(model, t, bounds, n_grid=80)
    fig, axs = plt.subplots(1, 2, figsize=(9, 4), sharey=True)
    for ax, fld, title in ((axs[0], raw, "flux without cancellation"),
                           (axs[1], corrected, "flux with cancellation")):
        ax.contourf(np.linspace(x_lo, x_hi, 80), np.linspace(y_lo, y_hi, 80),
                    rho.T, levels=12, cmap="Greys")
        ax.quiver(pts[:, 0], pts[:, 1], fld[:, 0], fld[:, 1], color="tab:red",
                  angles="xy")
        ax.set_title(f"{title} (t={t:g})")
    fig.savefig(out_path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out_path


def plot_farfield(assembly, out_path, t=0.5, radius_max=40.0):
    D = assembly.model.dim
    dirs = np.concatenate([np.eye(D), -np.eye(D)], axis=0)
    radii = np.linspace(2.0, radius_max, 16)
    probe = ev.farfield_probe(assembly, t, dirs, radii)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.semilogy(radii, np.maximum(probe["spurious"], 1e-300), "o-",
                label="raw time-derivative term")
    ax.semilogy(radii, np.maximum(probe["corrected"], 1e-300), "s-",
                label="corrected flux")
    ax.set_xlabel("radius along rays")
    ax.set_ylabel("max |flux coordinate|")
    ax.legend()
    fig.savefig(out_path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out_path


def plot_trajectories(traj, out_path, env=None, axes=(0, 1), max_lines=256,
                      title="trajectories"):
    fig, ax = plt.subplots(figsize=(5, 5))
    states = traj.states
    for i in range(min(len(states), max_lines)):
        ax.plot(states[i, :, axes[0]], states[i, :, axes[1]],
                color="tab:blue", alpha=0.12, lw=0.8)
    ax.scatter(states[:max_lines, 0, axes[0]], states[:max_lines, 0, axes[1]],
               s=4, color="tab:green", label="start")
    ax.scatter(states[:max_lines, -1, axes[0]], states[:max_lines, -1, axes[1]],
               s=4, color="tab:red", label="end")
    if env is not None:
        for c, r in env.obstacles:
            ax.add_patch(plt.Circle(c, r, fill=False, color="black", lw=1.5))
        ax.set_xlim(env.arena[0][0], env.arena[1][0])
        ax.set_ylim(env.arena[0][1], env.arena[1][1])
    ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8)
    fig.savefig(out_path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out_path


def plot_soc_paths(assembly, env, out_path, n_traj=256, steps=200, seed=0,
                   g_values=(0.0, 0.5)):
    """Trajectory panels at each requested noise level (deterministic first)."""
    fig, axs = plt.subplots(1, len(g_values), figsize=(5 * len(g_values), 5))
    if len(g_values) == 1:
        axs = [axs]
    rng = np.random.default_rng(seed)
    x0 = dm.sample(assembly.model, 0.0, n_traj, rng)
    grid = np.linspace(0.0, 1.0, steps + 1)
    for ax, g in zip(axs, g_values):
        traj = ev.integrate(assembly, x0, grid, g=g,
                            rng=np.random.default_rng(seed + 1))
        for i in range(len(traj.states)):
            ax.plot(traj.states[i, :, 0], traj.states[i, :, 1],
                    color="tab:blue", alpha=0.1, lw=0.8)
        for c, r in env.obstacles:
            ax.add_patch(plt.Circle(c, r, fill=False, color="black", lw=1.5))
        ax.set_xlim(env.arena[0][0], env.arena[1][0])
        ax.set_ylim(env.arena[0][1], env.arena[1][1])
        ax.set_title(f"g = {g:g}")
    fig.savefig(out_path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out_path
