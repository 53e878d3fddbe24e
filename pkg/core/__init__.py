# Channel model, autograd, feedback models, training and evaluation
