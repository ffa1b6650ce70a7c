"""Report figures (matplotlib, Agg backend).

Every function renders to a PNG file and returns its path.  PNG metadata is
stripped so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write  # noqa: E402

_RC = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "image.cmap": "viridis",
    "svg.hashsalt": "sobolev-diffeo",
}


def _save(fig, path):
    import io

    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())
    return os.fspath(path)


def _figure(ncols=1, width=4.0, height=3.2):
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
    return fig, axes[0]


def plot_deformation(phi, path, title="deformation", stride=None):
    """1D: ``phi(x) - x`` and ``det D phi``; 2D: warped coordinate grid coloured by the Jacobian."""
    grid = phi.grid
    with plt.rc_context(_RC):
        if grid.dim == 1:
            fig, (a0, a1) = _figure(2)
            x = grid.coords[0]
            a0.plot(x, phi.displacement.values[0], color="C0")
            a0.set_xlabel("x")
            a0.set_ylabel("phi(x) - x")
            a1.plot(x, phi.jac_det.values, color="C1")
            a1.set_xlabel("x")
            a1.set_ylabel("det D phi")
        else:
            fig, (ax,) = _figure(1, 4.4, 4.0)
            X = phi.positions
            step = stride or max(1, grid.sizes[0] // 32)
            im = ax.imshow(phi.jac_det.values.T, origin="lower", extent=(0, grid.lengths[0], 0, grid.lengths[1]),
                           alpha=0.6)
            for i in range(0, grid.sizes[0], step):
                ax.plot(X[0, i, :], X[1, i, :], color="k", lw=0.5)
            for j in range(0, grid.sizes[1], step):
                ax.plot(X[0, :, j], X[1, :, j], color="k", lw=0.5)
            fig.colorbar(im, ax=ax, label="det D phi")
            ax.set_xlim(0, grid.lengths[0])
            ax.set_ylim(0, grid.lengths[1])
            ax.set_aspect("equal")
        fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_trace(trace, path, stage_ends=(), title="objective"):
    with plt.rc_context(_RC):
        fig, (ax,) = _figure()
        vals = np.asarray(trace, dtype=float)
        ax.semilogy(np.arange(len(vals)), np.maximum(vals, 1e-300), color="C0")
        for e in stage_ends[:-1]:
            ax.axvline(e - 0.5, color="0.6", ls="--", lw=0.8)
        ax.set_xlabel("accepted step")
        ax.set_ylabel("objective")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_speed(report, path, title="speed profile"):
    with plt.rc_context(_RC):
        fig, (ax,) = _figure()
        ax.stairs(report.speed_profile, report.knots, color="C2")
        ax.set_xlabel("t")
        ax.set_ylabel("|u(t)|_{H^s}")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_images(images, labels, path, title=""):
    """Side-by-side panels; 1D images are drawn as curves on one axis."""
    grid = images[0].grid
    with plt.rc_context(_RC):
        if grid.dim == 1:
            fig, (ax,) = _figure(1, 5.0)
            for k, (im, lab) in enumerate(zip(images, labels)):
                ax.plot(grid.coords[0], im.values, label=lab, color=f"C{k}")
            ax.set_xlabel("x")
            ax.legend(frameon=False)
        else:
            fig, axes = _figure(len(images), 3.2, 3.0)
            vmin = min(float(im.values.min()) for im in images)
            vmax = max(float(im.values.max()) for im in images)
            for ax, im, lab in zip(axes, images, labels):
                ax.imshow(im.values.T, origin="lower", vmin=vmin, vmax=vmax,
                          extent=(0, grid.lengths[0], 0, grid.lengths[1]))
                ax.set_title(lab)
                ax.grid(False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_landmarks(trajectory, path, target=None, title="landmark trajectories"):
    q = trajectory.q
    with plt.rc_context(_RC):
        fig, (ax,) = _figure(1, 4.2, 3.6)
        if q.shape[-1] == 1:
            for i in range(q.shape[1]):
                ax.plot(trajectory.times, q[:, i, 0], color=f"C{i % 10}")
            if target is not None:
                ax.plot(np.full(len(target), trajectory.times[-1]), target[:, 0], "kx")
            ax.set_xlabel("t")
            ax.set_ylabel("q")
        else:
            for i in range(q.shape[1]):
                ax.plot(q[:, i, 0], q[:, i, 1], color=f"C{i % 10}")
                ax.plot(q[0, i, 0], q[0, i, 1], "o", color=f"C{i % 10}", ms=3)
            if target is not None:
                ax.plot(target[:, 0], target[:, 1], "kx")
            ax.set_aspect("equal")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_selfcheck(names, margins, passed, path):
    """Horizontal bars of ``log10(tolerance / measured)``; positive means inside tolerance."""
    with plt.rc_context(_RC):
        fig, (ax,) = _figure(1, 6.0, 0.25 * len(names) + 1.2)
        y = np.arange(len(names))
        colours = ["C2" if ok else "C3" for ok in passed]
        ax.barh(y, margins, color=colours)
        ax.set_yticks(y, names)
        ax.axvline(0, color="k", lw=0.8)
        ax.invert_yaxis()
        ax.set_xlabel("log10(tolerance / measured)")
        fig.tight_layout()
        return _save(fig, path)
