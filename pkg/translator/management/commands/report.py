from rest_framework.exceptions import ParseError
from rest_framework.parsers import JSONParser

from translator.cli import A2ACommand, render_json
from translator.exceptions import DatasetError
from translator.metrics import format_table, merge_reports
from translator.serializers import MetricsReportSerializer, ReportSerializer, format_errors


def read_reports(path):
    """Reports from an evaluate document, a list of reports or one report."""
    try:
        with open(path, 'rb') as stream:
            data = JSONParser().parse(stream)
    except ParseError as exc:
        raise DatasetError(f"{path}: {exc.detail}") from None
    if isinstance(data, dict):
        data = data.get('reports', [data])
    serializer = MetricsReportSerializer(data=data, many=True)
    if not serializer.is_valid():
        raise DatasetError(f"{path}: not a metrics report ({format_errors(serializer.errors)})")
    return serializer.save()


class Command(A2ACommand):
    help = 'Merge metric reports into one table; later files override earlier rows for the same direction.'
    serializer_class = ReportSerializer

    def add_options(self, parser):
        parser.add_argument('files', nargs='*', metavar='REPORT', help='JSON reports written by evaluate')
        parser.add_argument('--format', help='json or table')

    def perform(self, options, echo):
        reports = merge_reports(read_reports(path) for path in options['files'])
        if options['format'] == 'json':
            self.write_json({'reports': MetricsReportSerializer(reports, many=True).data})
        else:
            self.stdout.write(format_table(reports), ending='')
