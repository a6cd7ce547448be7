"""Spatio-temporal CNN for left-ventricle quantification."""
