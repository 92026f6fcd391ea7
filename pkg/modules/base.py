import torch.nn as nn


class BaseModule(nn.Module):
    def __init__(self):
        super(BaseModule, self).__init__()
        self.inference_mode = False

    def set_inference_mode(self):
        self.eval()
        self.inference_mode = True

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())
