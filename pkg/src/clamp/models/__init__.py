"""Hand-rolled classifiers: 1-D conv network, random forest, metrics."""
