"""Agent backends: scripted replay, synthetic dynamics and remote chat completion."""
