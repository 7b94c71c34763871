"""From waveform to quaternion features.

The front end computes a log-mel spectrogram (Hann 1024 / hop 320 / 64 mel
bands, 50 Hz - 14 kHz) and encodes each time-frequency bin as a quaternion:
the mel energy in the real plane and its first three temporal derivatives
in the imaginary planes.  A 10 s clip at 32 kHz lands on exactly 1000
frames thanks to the reflect padding.
"""

import numpy as np

from qprune import encode_quaternion_features, wav_to_mel
from qprune.features import mel_filterbank

sr = 32000
t = np.arange(10 * sr) / sr

fb, centers = mel_filterbank()
tone_band = 20
clip = 0.4 * np.sin(2 * np.pi * centers[tone_band] * t)
clip += 0.05 * np.sin(2 * np.pi * centers[45] * t)  # quieter high band

mel = wav_to_mel(clip)
print(f"log-mel: {mel.frames} frames x {mel.bins} bands "
      f"(window {mel.window}, hop {mel.hop})")
mid = mel.values[mel.frames // 2]
print(f"loudest band at mid-clip: {mid.argmax()} (tone sits in band {tone_band})")

q = encode_quaternion_features(mel)
print("\nquaternion features:", q.data.shape, "(plane, channel, frames, bands)")
for name, plane in zip(("psi", "d1", "d2", "d3"), q.data[:, 0]):
    print(f"  {name}: mean {plane.mean():+.3f}  std {plane.std():.3f}")

# a steady tone has tiny temporal derivatives; silence has none at all
silence = wav_to_mel(np.zeros(sr))
qs = encode_quaternion_features(silence)
print("\nsilence: psi constant at log(1e-10) =", qs.data[0, 0, 0, 0],
      "derivative planes all zero:", bool((qs.data[1:] == 0).all()))
