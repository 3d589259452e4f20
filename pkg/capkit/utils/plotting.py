import io
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp so repeated runs produce identical bytes
SVG_RC = {"svg.hashsalt": "capkit", "svg.fonttype": "none"}


def line_plot_svg(
    x: Sequence[float],
    y: Sequence[float],
    title: str,
    xlabel: str,
    ylabel: str,
    logx: bool = False,
    logy: bool = False,
) -> bytes:
    """Render a single marked line series as SVG bytes."""
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        try:
            ax.plot(list(x), list(y), marker="o", linewidth=1.2)
            if logx:
                ax.set_xscale("log")
            if logy:
                ax.set_yscale("log")
            ax.set_title(title)
            ax.set_xlabel(xlabel)
            ax.set_ylabel(ylabel)
            ax.grid(True, which="both", alpha=0.3)
            buffer = io.BytesIO()
            fig.savefig(buffer, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return buffer.getvalue()
