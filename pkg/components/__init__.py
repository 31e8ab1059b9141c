# DeepFuse exposure fusion
# Presentation helpers for the command line
