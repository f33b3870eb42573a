# Numerical modules, bottom-up: field, symbols, quantize, wsnorm, evolve,
# sensitivity, calculus, manybody.
