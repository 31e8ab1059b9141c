# DeepFuse exposure fusion
# Library package: tensors, metric, network, training, fusion, baselines
