"""Downstream uses of the learned attention: summaries, gaze, co-segmentation, overlays."""
