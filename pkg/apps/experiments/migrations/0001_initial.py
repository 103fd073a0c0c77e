from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(max_length=50)),
                ('config_hash', models.CharField(db_index=True, max_length=16)),
                ('config_text', models.TextField()),
                ('seed', models.BigIntegerField()),
                ('version', models.CharField(max_length=20)),
                ('status', models.CharField(choices=[('RUNNING', 'Running'), ('DONE', 'Done'), ('FAILED', 'Failed')],
                                            default='RUNNING', max_length=10)),
                ('output_paths', models.JSONField(default=list)),
                ('error', models.JSONField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='SweepCell',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('kind', models.CharField(max_length=20)),
                ('config_hash', models.CharField(max_length=16)),
                ('cell_id', models.CharField(max_length=100)),
                ('status', models.CharField(choices=[('PENDING', 'Pending'), ('DONE', 'Done'), ('FAILED', 'Failed')],
                                            default='PENDING', max_length=10)),
                ('seed', models.BigIntegerField()),
                ('rows', models.JSONField(default=list)),
                ('diagnostics', models.JSONField(default=dict)),
                ('error', models.JSONField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['kind', 'cell_id'],
            },
        ),
        migrations.AddConstraint(
            model_name='sweepcell',
            constraint=models.UniqueConstraint(fields=('kind', 'config_hash', 'cell_id'), name='unique_sweep_cell'),
        ),
    ]
