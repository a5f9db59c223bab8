"""Temporal-difference calibration of success predictors for episodic sequential tasks."""
