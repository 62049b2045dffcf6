"""
Network checkpoints in the shared binary container format.
"""
import logging
from pathlib import Path

from specmatch.containers import ContainerError, read_container, write_container
from specmatch.exceptions import ConfigError, DataError
from .network import NetConfig, NetParams

logger = logging.getLogger(__name__)

FORMAT_VERSION = 2
KIND = 'specmatch-checkpoint'


class CheckpointError(DataError):
    pass


class CheckpointMismatchError(ConfigError):
    pass


def save_checkpoint(path, params, spectral_config, seed, epoch):
    header = {
        'format_version': FORMAT_VERSION,
        'kind': KIND,
        'config': {
            'net': params.config.as_dict(),
            'spectral': {'k': spectral_config.k, 'n_hks': spectral_config.n_hks,
                         'hks_scaling': spectral_config.hks_scaling},
        },
        'seed': seed,
        'epoch': epoch,
    }
    write_container(path, header, params.tensors)
    logger.debug('Saved checkpoint (epoch %s) to %s', epoch, path)
    return Path(path)


def load_checkpoint(path, net_config=None, spectral_config=None):
    """
    Return (NetParams, header). When configs are given, the checkpoint's
    network config and spectral settings must equal them.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f'No checkpoint at {path}')
    try:
        header, tensors = read_container(path)
    except ContainerError as e:
        raise CheckpointError(str(e)) from e
    if header.get('kind') != KIND or header.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(f'{path} is not a version-{FORMAT_VERSION} checkpoint')

    saved = header['config']
    try:
        stored_net = NetConfig(**saved['net'])
    except (TypeError, ConfigError) as e:
        raise CheckpointError(f'{path}: bad network config in header: {e}') from e

    if net_config is not None and net_config != stored_net:
        raise CheckpointMismatchError(
            f'{path}: checkpoint network config {stored_net.as_dict()} != requested {net_config.as_dict()}'
        )
    if spectral_config is not None:
        spectral = saved['spectral']
        requested = {'k': spectral_config.k, 'n_hks': spectral_config.n_hks,
                     'hks_scaling': spectral_config.hks_scaling}
        if spectral != requested:
            raise CheckpointMismatchError(
                f'{path}: checkpoint was trained with spectral settings {spectral}, requested {requested}'
            )

    try:
        params = NetParams(stored_net, tensors)
    except ConfigError as e:
        raise CheckpointError(f'{path}: {e}') from e
    return params, header
