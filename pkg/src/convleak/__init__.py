"""convleak: a desk-scale power side-channel laboratory for line-buffer
CNN accelerators.

Simulates the first convolution layer of a binarized CNN accelerator
with a Hamming-distance leakage model, renders realistic noisy power
traces through a measurement-chain model, recovers per-cycle power
from those traces, and runs two input-recovery attacks: background
detection (passive) and power-template reconstruction (active).
"""

from .accel import (AccelConfig, CyclePowers, CycleSchedule, Kernel,
                    convolve_layer, generate_kernels, load_kernels,
                    run_all_kernels, save_kernels, simulate_cycles)
from .chain import (ChainConfig, RawTrace, add_noise, apply_highpass, measure,
                    read_trace, render_pdn, sigma_for_snr, write_trace)
from .extract import (AlignmentPoints, ExtractConfig, FitParams, align,
                      extract_cycle_power, lowpass, read_cycle_powers,
                      restore_dc, run_extraction, write_cycle_powers)
from .imgio import (Image, SilhouetteImage, binarize_markers, load_idx,
                    load_idx_labels, load_pgm, write_idx, write_idx_labels,
                    write_pgm)

__version__ = "0.1.0"
