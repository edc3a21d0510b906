"""
Artifact writer for the Epstein-Zin duality toolkit
"""
import json
import logging
import os

import pandas as pd
from reportlab.lib import colors
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

import config
from backend.models import _plain

logger = logging.getLogger(__name__)


class ReportGenerator:
    """Write CSV, JSON-lines and optional PDF/Excel artifacts for one run

    Every file is fully determined by its content arguments; wall-clock
    times enter the JSON-lines metadata only when timings are enabled.
    """

    def __init__(self, directory=None, formats=None, timings=False):
        self.styles = getSampleStyleSheet()
        self.reports_dir = directory or config.REPORTS_FOLDER
        self.formats = [f.lower() for f in (formats or ['csv', 'jsonl'])]
        self.timings = timings
        self.written = []
        self._stages = []
        os.makedirs(self.reports_dir, exist_ok=True)

    def _path(self, filename):
        path = os.path.join(self.reports_dir, filename)
        self.written.append(path)
        return path

    def write_frame(self, name, frame, title=None):
        """CSV of a DataFrame (always), plus Excel/PDF renderings when requested"""
        path = self._path(f'{name}.csv')
        frame.to_csv(path, index=False, float_format=config.FLOAT_FORMAT, lineterminator='\n')
        logger.debug('Wrote %s (%d rows)', path, len(frame))
        if 'excel' in self.formats:
            self._write_excel(name, frame)
        if 'pdf' in self.formats and title:
            self._write_pdf(name, title, frame)
        return path

    def write_records(self, name, records):
        """JSON-lines file, one object per record, floats in round-trip repr"""
        path = self._path(f'{name}.jsonl')
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            for record in records:
                handle.write(json.dumps(_plain(record), sort_keys=True) + '\n')
        return path

    def stage(self, name, /, flags=None, wall_time=None, **fields):
        """Queue a metadata record for one pipeline stage"""
        record = {'stage': name, 'flags': {k: bool(v) for k, v in (flags or {}).items()}}
        record.update(fields)
        if self.timings and wall_time is not None:
            record['wall_time'] = wall_time
        self._stages.append(record)
        return record

    def write_metadata(self, name='metadata'):
        return self.write_records(name, self._stages)

    def write_key_values(self, name, values, title=None):
        """Two-column (key, value) table of a flat report"""
        frame = pd.DataFrame({'key': list(values.keys()),
                              'value': [_format_value(v) for v in values.values()]})
        return self.write_frame(name, frame, title=title)

    def _write_excel(self, name, frame):
        path = self._path(f'{name}.xlsx')
        with pd.ExcelWriter(path, engine='openpyxl') as writer:
            frame.to_excel(writer, sheet_name=name[:31], index=False)

    def _write_pdf(self, name, title, frame):
        path = self._path(f'{name}.pdf')
        doc = SimpleDocTemplate(path, pagesize=A4, invariant=1, title=title)
        title_style = ParagraphStyle('ReportTitle', parent=self.styles['Heading1'], fontSize=16,
                                     spaceAfter=20, alignment=1)
        story = [Paragraph(title, title_style), Spacer(1, 12)]
        header = [str(c) for c in frame.columns]
        rows = [[_format_value(v) for v in row] for row in frame.itertuples(index=False)]
        table = Table([header] + rows, repeatRows=1)
        table.setStyle(TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), colors.grey),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, -1), 8),
            ('GRID', (0, 0), (-1, -1), 0.5, colors.black),
            ('ROWBACKGROUNDS', (0, 1), (-1, -1), [colors.white, colors.beige]),
        ]))
        story.append(table)
        doc.build(story)


def _format_value(value):
    if isinstance(value, bool) or value is None:
        return str(value)
    if isinstance(value, float):
        return config.FLOAT_FORMAT % value
    return str(value)
