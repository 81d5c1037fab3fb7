"""KL-constrained robust losses with per-instance learned temperatures.

The package splits along the math: closed-form loss pieces (`dro_core`), the
per-instance temperature solver (`tau_solver`), a minimal reverse-mode tape
(`diff_engine`), the temperature network (`tempnet`), desk-scale consumers of
the losses (`models`), the deterministic training loop (`trainer`), the
verification suite (`verify`), and the command-line surface (`cli`).
"""

__version__ = "0.1.0"
