"""Global signal-chain constants shared by every module.

All audio in the simulator runs at one rate and one framing; agents,
feature extraction and telemetry must agree on these or nothing lines up.
"""

SAMPLE_RATE = 32000          # Hz, fixed for the whole simulation
NYQUIST = SAMPLE_RATE // 2   # 16 kHz
FRAME_SIZE = 1024            # samples per analysis frame
FRAME_HOP = 512              # samples per scheduler tick (50% overlap)
TICK_SECONDS = FRAME_HOP / SAMPLE_RATE  # 16 ms

HIGHPASS_HZ = 80.0           # input high-pass cutoff, rumble rejection

N_MEL_BANDS = 128            # spectral niches available to the agents
MEL_FMIN_HZ = 80.0
MEL_FMAX_HZ = float(NYQUIST)

N_MFCC = 13
LOG_FLOOR = 1e-10            # added before log() of band energies

RMS_FLOOR = 1e-5             # quietest frame RMS considered non-silent
