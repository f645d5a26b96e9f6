#!/usr/bin/env python3

# Command line front end for the zero-shot GAN lab: generate a synthetic
# benchmark, train the text conditioned generator, evaluate zero-shot and
# generalized zero-shot recognition and zero-shot retrieval, and run the
# ablation grid and the gradient check.
#
# Progress and warnings are written to standard error, reports and tables
# to files or standard output.
#
# SPDX-License-Identifier: GPL-3.0-only

import configparser
import csv
import dataclasses
import json
import logging
import pathlib
import statistics
import sys

import click
import numpy as np

import zslautodiff
import zsldata
import zsleval
import zslgan
import zsltext
from zslerrors import ConfigError, NumericalError, ValidationError, ZslError

logger = logging.getLogger('zslrun')

DATA_ROOT_ENV = 'ZSL_DATA_ROOT'

PRIMITIVE_TOLERANCE = 1e-4
SATURATING_TOLERANCE = {'tanh': 1e-3}

# (name, ablation) rows of the ablation table
ABLATION_VARIANTS = (('full', 'none'), ('VP-only', 'vp-only'), ('GAN-only', 'gan-only'))


def read_config(config_file):
    '''Read an INI configuration file, or the same sections as JSON'''
    config = configparser.ConfigParser(interpolation=None)
    if config_file is None:
        return config
    try:
        with open(config_file, 'r', encoding='utf-8') as open_file:
            if pathlib.Path(config_file).suffix == '.json':
                config.read_dict(json.load(open_file))
            else:
                config.read_file(open_file)
    except OSError as e:
        raise ConfigError(f'cannot read configuration file {config_file}: {e.strerror}') from e
    except (json.JSONDecodeError, UnicodeDecodeError, configparser.Error, AttributeError, TypeError) as e:
        raise ConfigError(f'{config_file}: not a valid configuration file ({e})') from e
    return config


def apply_config(config, section, settings):
    '''Override the fields of a settings dataclass with the options of one section'''
    if not config.has_section(section):
        return settings
    known = {f.name for f in dataclasses.fields(settings)}
    values = {}
    for key in config[section]:
        if key not in known:
            logger.warning('[%s] unknown option %s ignored', section, key)
            continue
        default = getattr(settings, key)
        try:
            if isinstance(default, bool):
                values[key] = config.getboolean(section, key)
            elif isinstance(default, int):
                values[key] = config.getint(section, key)
            elif isinstance(default, float):
                values[key] = config.getfloat(section, key)
            else:
                values[key] = config.get(section, key)
        except ValueError as e:
            raise ConfigError(f'[{section}] {key}: {e}') from e
    return dataclasses.replace(settings, **values)


def override(settings, **flags):
    '''Command line flags win over configuration file values'''
    return dataclasses.replace(settings, **{k: v for k, v in flags.items() if v is not None})


def fail(error):
    click.echo(f'error: {error}', err=True)
    sys.exit(error.exit_code)


def prepare_output_dir(out_dir, force):
    if out_dir.exists():
        if not out_dir.is_dir():
            raise ConfigError(f'{out_dir} exists and is not a directory')
        if any(out_dir.iterdir()) and not force:
            raise ConfigError(f'{out_dir} is not empty, use --force to overwrite')
    out_dir.mkdir(parents=True, exist_ok=True)


def emit_json(payload, out_file):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out_file is None:
        click.echo(text)
    else:
        with open(out_file, 'w', encoding='utf-8') as open_file:
            open_file.write(text + '\n')


def eval_settings(cfg, **flags):
    settings = override(apply_config(read_config(cfg), 'eval', zsleval.EvalConfig()), **flags)
    settings.validate()
    return settings


def new_report(model, bundle, settings, clamped):
    return zsleval.EvalReport(dataset=bundle.name, split_style=bundle.style,
                              config_digest=zslgan.config_digest(model.config),
                              eval_config=settings.to_dict(), clamped=clamped)


def load_for_evaluation(model_file, data_dir, stoplist_file):
    model = zslgan.load_model(model_file)
    bundle = zsldata.load_dataset(data_dir)
    data = zsleval.prepare_evaluation(model, bundle, zsltext.load_stoplist(stoplist_file))
    if len(data.unseen_labels) == 0:
        raise ValidationError(f'{data_dir}: no instances of unseen classes to evaluate')
    return model, bundle, data


def unseen_top1(model, bundle, settings, stoplist, seed):
    data = zsleval.prepare_evaluation(model, bundle, stoplist)
    bank = zsleval.build_bank(model, data.texts, data.unseen, settings.synth_per_class, seed)
    predictions = zsleval.classify_nn(data.unseen_queries, bank, 'instance')
    return zsleval.top1_accuracy(predictions, data.unseen_labels)


def ablation_table(bundle, config, seeds, lambda_values, settings, stoplist):
    '''Unseen top-1 of every ablation variant, with and without the text FC
    layer, for every seed and lambda_p'''
    rows = []
    for lambda_p in lambda_values:
        for variant, ablation in ABLATION_VARIANTS:
            for text_fc in (True, False):
                for seed in seeds:
                    run_config = dataclasses.replace(config, seed=seed, ablation=ablation,
                                                     text_fc=text_fc, lambda_p=lambda_p)
                    model = zslgan.train(bundle, run_config, stoplist).model
                    top1 = unseen_top1(model, bundle, settings, stoplist, settings.seed)
                    logger.info('%s text_fc=%s lambda_p=%g seed=%d: top-1 %.4f',
                                variant, text_fc, lambda_p, seed, top1)
                    rows.append({'variant': variant, 'text_fc': text_fc, 'lambda_p': lambda_p,
                                 'seed': seed, 'top1': top1})
    return rows


def summarize_ablation(rows):
    summary = {}
    for row in rows:
        key = (row['variant'], row['text_fc'], row['lambda_p'])
        summary.setdefault(key, []).append(row['top1'])
    return [{'variant': variant, 'text_fc': text_fc, 'lambda_p': lambda_p,
             'mean_top1': statistics.fmean(values), 'runs': len(values)}
            for (variant, text_fc, lambda_p), values in summary.items()]


def parse_seeds(seeds):
    try:
        values = [int(s) for s in seeds.split(',') if s.strip()]
    except ValueError:
        raise ConfigError(f'cannot parse seeds {seeds!r}') from None
    if not values:
        raise ConfigError('no seeds given')
    return values


config_option = click.option('--config-file', '-c', 'cfg', help='configuration file (INI or JSON)',
                             type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path))
data_dir_option = click.option('--data-dir', '-d', 'data_dir', required=True, envvar=DATA_ROOT_ENV,
                               help=f'dataset directory (default: ${DATA_ROOT_ENV})',
                               type=click.Path(exists=True, file_okay=False, path_type=pathlib.Path))
model_option = click.option('--model', '-m', 'model_file', required=True, help='model file',
                            type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path))
stoplist_option = click.option('--stoplist', 'stoplist_file', help='stoplist file',
                               type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path))
report_option = click.option('--out', '-o', 'out_file', help='report file (default: standard output)',
                             type=click.Path(dir_okay=False, path_type=pathlib.Path))
eval_seed_option = click.option('--seed', 'seed', type=int, help='seed of the synthesized feature bank')
synth_option = click.option('--synth-per-class', 'synth_per_class', type=int,
                            help='synthesized features per class')


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='debug output')
def app(verbose):
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if verbose else logging.INFO,
                        format='%(levelname)s %(name)s: %(message)s')


@app.command(short_help='generate the synthetic benchmark')
@config_option
@click.option('--out-dir', '-o', 'out_dir', required=True, help='output directory',
              type=click.Path(file_okay=False, path_type=pathlib.Path))
@click.option('--seed', 'seed', type=int, help='benchmark seed')
@click.option('--noise-rate', 'noise_rate', type=float, help='fraction of noise tokens in the articles')
@click.option('--force', is_flag=True, help='write into a non-empty directory')
@stoplist_option
def synthdata(cfg, out_dir, seed, noise_rate, force, stoplist_file):
    try:
        spec = apply_config(read_config(cfg), 'synthetic', zsldata.SyntheticSpec())
        spec = override(spec, seed=seed, noise_rate=noise_rate)
        spec.validate()
        prepare_output_dir(out_dir, force)
        benchmark = zsldata.generate_synthetic(spec, out_dir, zsltext.load_stoplist(stoplist_file))
        logger.info('wrote %d instances of %d classes to %s', len(benchmark.bundle.labels),
                    spec.classes, out_dir)
    except ZslError as e:
        fail(e)


@app.command(short_help='train the generator on the seen classes')
@config_option
@data_dir_option
@click.option('--model', '-m', 'model_file', required=True, help='model file to write',
              type=click.Path(dir_okay=False, path_type=pathlib.Path))
@click.option('--losses', 'losses_file', help='loss CSV (default: <model>.losses.csv)',
              type=click.Path(dir_okay=False, path_type=pathlib.Path))
@click.option('--seed', 'seed', type=int, help='training seed')
@click.option('--steps', 'steps', type=int, help='number of training loops')
@click.option('--lambda-p', 'lambda_p', type=float, help='weight of the visual pivot regularizer')
@click.option('--gp-coeff', 'gp_coeff', type=float, help='gradient penalty coefficient')
@click.option('--z-dim', 'z_dim', type=int, help='noise dimension')
@click.option('--ablation', 'ablation', type=click.Choice(zslgan.ABLATIONS), help='ablation variant')
@click.option('--no-text-fc', 'no_text_fc', is_flag=True, help='feed the TF-IDF vector to the generator directly')
@click.option('--wall-clock', 'wall_clock', is_flag=True, help='record the time per loop')
@stoplist_option
def train(cfg, data_dir, model_file, losses_file, seed, steps, lambda_p, gp_coeff, z_dim,
          ablation, no_text_fc, wall_clock, stoplist_file):
    try:
        config = apply_config(read_config(cfg), 'train', zslgan.TrainConfig())
        config = override(config, seed=seed, steps=steps, lambda_p=lambda_p, gp_coeff=gp_coeff,
                          z_dim=z_dim, ablation=ablation, text_fc=False if no_text_fc else None,
                          wall_clock=True if wall_clock else None)
        config.validate()
        bundle = zsldata.load_dataset(data_dir)
        result = zslgan.train(bundle, config, zsltext.load_stoplist(stoplist_file))
        zslgan.save_model(model_file, result.model)
        if losses_file is None:
            losses_file = model_file.with_name(model_file.name + '.losses.csv')
        zslgan.write_history(losses_file, result.history, result.model.config)
        logger.info('model written to %s, losses to %s', model_file, losses_file)
    except ZslError as e:
        fail(e)


@app.command(name='eval', short_help='zero-shot recognition of the unseen classes')
@config_option
@data_dir_option
@model_option
@report_option
@click.option('--nn-mode', 'nn_mode', type=click.Choice(zsleval.NN_MODES), help='nearest neighbour mode')
@eval_seed_option
@synth_option
@stoplist_option
def evaluate(cfg, data_dir, model_file, out_file, nn_mode, seed, synth_per_class, stoplist_file):
    try:
        settings = eval_settings(cfg, nn_mode=nn_mode, seed=seed, synth_per_class=synth_per_class)
        model, bundle, data = load_for_evaluation(model_file, data_dir, stoplist_file)
        bank = zsleval.build_bank(model, data.texts, data.unseen, settings.synth_per_class, settings.seed)
        report = new_report(model, bundle, settings, data.clamped)
        for mode in settings.modes():
            predictions = zsleval.classify_nn(data.unseen_queries, bank, mode)
            report.top1[mode] = zsleval.top1_accuracy(predictions, data.unseen_labels)
        emit_json(report.to_dict(), out_file)
    except ZslError as e:
        fail(e)


@app.command(short_help='generalized zero-shot evaluation (seen-unseen curve)')
@config_option
@data_dir_option
@model_option
@report_option
@click.option('--curve', 'curve_file', required=True, help='CSV file for the seen-unseen curve',
              type=click.Path(dir_okay=False, path_type=pathlib.Path))
@click.option('--dense-grid', 'dense_grid', is_flag=True, help='use 10,001 evenly spaced calibration values')
@eval_seed_option
@synth_option
@stoplist_option
def gzsl(cfg, data_dir, model_file, out_file, curve_file, dense_grid, seed, synth_per_class, stoplist_file):
    try:
        settings = eval_settings(cfg, seed=seed, synth_per_class=synth_per_class,
                                 dense_grid=True if dense_grid else None)
        model, bundle, data = load_for_evaluation(model_file, data_dir, stoplist_file)
        bank = zsleval.build_bank(model, data.texts, data.seen + data.unseen,
                                  settings.synth_per_class, settings.seed)
        curve = zsleval.gzsl_curve(data.seen_queries, data.seen_labels, data.unseen_queries,
                                   data.unseen_labels, bank, data.seen, dense=settings.dense_grid)
        report = new_report(model, bundle, settings, data.clamped)
        report.ausuc = curve.ausuc
        zsleval.write_curve(curve_file, curve, report.config_digest, settings.seed)
        emit_json(report.to_dict(), out_file)
    except ZslError as e:
        fail(e)


@app.command(short_help='zero-shot retrieval with class pivots as queries')
@config_option
@data_dir_option
@model_option
@report_option
@click.option('--table', 'table_file', help='CSV table of average precision per class and ratio',
              type=click.Path(dir_okay=False, path_type=pathlib.Path))
@click.option('--ratios', 'ratios', help='comma separated fractions of the class size to retrieve')
@eval_seed_option
@synth_option
@stoplist_option
def retrieve(cfg, data_dir, model_file, out_file, table_file, ratios, seed, synth_per_class, stoplist_file):
    try:
        settings = eval_settings(cfg, ratios=ratios, seed=seed, synth_per_class=synth_per_class)
        model, bundle, data = load_for_evaluation(model_file, data_dir, stoplist_file)
        bank = zsleval.build_bank(model, data.texts, data.unseen, settings.synth_per_class, settings.seed)
        report = new_report(model, bundle, settings, data.clamped)
        columns = []
        for ratio in settings.ratio_values():
            per_class, mean_ap = zsleval.retrieval_map(bank.pivots, data.unseen_queries,
                                                       data.unseen_labels, ratio)
            report.map_at[f'{ratio:g}'] = mean_ap
            report.per_class_ap[f'{ratio:g}'] = {str(c): ap for c, ap in per_class.items()}
            columns.append((ratio, per_class, mean_ap))
        if table_file is not None:
            with open(table_file, 'w', encoding='utf-8', newline='') as open_file:
                open_file.write(zsleval.provenance_line(report.config_digest, settings.seed))
                writer = csv.writer(open_file, lineterminator='\n')
                writer.writerow(['class_id'] + [f'{ratio * 100:g}%' for ratio, _, _ in columns])
                for class_id in data.unseen:
                    writer.writerow([class_id] + [repr(per_class[class_id]) for _, per_class, _ in columns])
                writer.writerow(['mAP'] + [repr(mean_ap) for _, _, mean_ap in columns])
        emit_json(report.to_dict(), out_file)
    except ZslError as e:
        fail(e)


@app.command(short_help='write the TF-IDF vectors of all class articles')
@data_dir_option
@click.option('--out', '-o', 'out_file', required=True, help='JSON file for the vectors',
              type=click.Path(dir_okay=False, path_type=pathlib.Path))
@stoplist_option
def encode(data_dir, out_file, stoplist_file):
    try:
        bundle = zsldata.load_dataset(data_dir)
        vocab, vectors = zsltext.encode_corpus(bundle.documents, bundle.seen,
                                               zsltext.load_stoplist(stoplist_file))
        zsltext.write_vectors(out_file, vectors)
        logger.info('%d terms in the vocabulary, %d vectors written to %s', len(vocab),
                    len(vectors), out_file)
    except ZslError as e:
        fail(e)


@app.command(short_help='export real and synthesized unseen features for plotting')
@config_option
@data_dir_option
@model_option
@click.option('--out', '-o', 'out_file', required=True, help='CSV file for the embeddings',
              type=click.Path(dir_okay=False, path_type=pathlib.Path))
@eval_seed_option
@synth_option
@stoplist_option
def export(cfg, data_dir, model_file, out_file, seed, synth_per_class, stoplist_file):
    try:
        settings = eval_settings(cfg, seed=seed, synth_per_class=synth_per_class)
        model, _, data = load_for_evaluation(model_file, data_dir, stoplist_file)
        bank = zsleval.build_bank(model, data.texts, data.unseen, settings.synth_per_class, settings.seed)
        zsleval.export_embeddings(out_file, data.unseen_queries, data.unseen_labels, bank,
                                  zslgan.config_digest(model.config), settings.seed)
    except ZslError as e:
        fail(e)


@app.command(short_help='train and evaluate the ablation variants')
@config_option
@data_dir_option
@report_option
@click.option('--table', 'table_file', help='CSV table of unseen top-1 per run',
              type=click.Path(dir_okay=False, path_type=pathlib.Path))
@click.option('--seeds', 'seeds', default='0,1,2', show_default=True, help='comma separated training seeds')
@click.option('--steps', 'steps', type=int, help='number of training loops')
@click.option('--lambda-p', 'lambda_values', type=float, multiple=True,
              help='weight of the visual pivot regularizer, repeat to sweep')
@stoplist_option
def ablation(cfg, data_dir, out_file, table_file, seeds, steps, lambda_values, stoplist_file):
    try:
        config_file = read_config(cfg)
        config = override(apply_config(config_file, 'train', zslgan.TrainConfig()), steps=steps)
        config.validate()
        settings = apply_config(config_file, 'eval', zsleval.EvalConfig())
        settings.validate()
        if not lambda_values:
            lambda_values = (config.lambda_p,)
        bundle = zsldata.load_dataset(data_dir)
        seed_list = parse_seeds(seeds)
        rows = ablation_table(bundle, config, seed_list, lambda_values, settings,
                              zsltext.load_stoplist(stoplist_file))
        if table_file is not None:
            with open(table_file, 'w', encoding='utf-8', newline='') as open_file:
                open_file.write(zsleval.provenance_line(zslgan.config_digest(config),
                                                        ','.join(map(str, seed_list))))
                writer = csv.DictWriter(open_file, ['variant', 'text_fc', 'lambda_p', 'seed', 'top1'],
                                        lineterminator='\n')
                writer.writeheader()
                writer.writerows(rows)
        emit_json({'dataset': bundle.name, 'config_digest': zslgan.config_digest(config),
                   'config': config.to_dict(), 'eval_config': settings.to_dict(),
                   'runs': rows, 'summary': summarize_ablation(rows)}, out_file)
    except ZslError as e:
        fail(e)


@app.command(short_help='check the gradients against finite differences')
@click.option('--trials', 'trials', default=100, show_default=True, help='random instances per check')
@click.option('--seed', 'seed', default=0, show_default=True, help='seed of the random instances')
def gradcheck(trials, seed):
    try:
        rng = np.random.default_rng(seed)
        failed = []
        for name in zslautodiff.GRADCHECK_CASES:
            worst = max(zslautodiff.check_primitive(name, rng) for _ in range(trials))
            tolerance = SATURATING_TOLERANCE.get(name, PRIMITIVE_TOLERANCE)
            click.echo(f'{name}\t{worst:.3e}\t{"ok" if worst < tolerance else "FAIL"}')
            if worst >= tolerance:
                failed.append(name)
        worst_loss = dict.fromkeys(zslgan.LOSS_TOLERANCES, 0.0)
        for _ in range(trials):
            for name, error in zslgan.check_loss_gradients(rng).items():
                worst_loss[name] = max(worst_loss[name], error)
        for name, worst in worst_loss.items():
            tolerance = zslgan.LOSS_TOLERANCES[name]
            click.echo(f'{name}\t{worst:.3e}\t{"ok" if worst < tolerance else "FAIL"}')
            if worst >= tolerance:
                failed.append(name)
        if failed:
            raise NumericalError(f'gradient check failed for {", ".join(failed)}')
    except ZslError as e:
        fail(e)


if __name__ == "__main__":
    app()
