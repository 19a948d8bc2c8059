from config import Txt
from helper.commands import command, option
from helper.latent import file_stats
from helper.utils import humanbytes


@command("inspect", Txt.INSPECT_TXT, configured=False, options=[option("path", help="LGR1 file to summarise")])
def cmd_inspect(ctx):
    path = ctx.args.path
    extent, stats, size = file_stats(path)
    print(Txt.INSPECT_REPORT.format(
        path=path,
        size=humanbytes(size),
        extent=extent,
        count=stats.count,
        minimum=stats.minimum,
        maximum=stats.maximum,
        mean=stats.mean,
        std=stats.std,
        nan_count=stats.nan_count,
    ))
