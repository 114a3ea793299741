# Synthetic toy-mel data
